"""pestclf: CNN toolkit for fine-grained insect pest image classification.

Four classifiers (ResNet-50 baseline, residual attention network, feature
pyramid classifier, multi-branch multi-scale attention network), a
soft-voting ensemble, a macro-averaged metric suite, and Grad-CAM
visualization over folder-organized image datasets.
"""

__version__ = "0.1.0"
