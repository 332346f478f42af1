import numpy as np
import pytest
import torch

from conftest import finite_diff_grad, relative_error
from np_reference import extractor_ref
from pestclf.errors import InputTooSmall, ShapeMismatch
from pestclf.resnet import (Bottleneck, ResNet50Classifier, ResNet50Features,
                            load_backbone_state)


class TestResidualBlock:
    def test_zeroed_transform_reduces_to_activation(self):
        torch.manual_seed(0)
        block = Bottleneck(8, 4, 8)  # identity skip
        block.eval()
        torch.nn.init.zeros_(block.conv3.weight)
        x = torch.randn(2, 8, 6, 6)
        out = block(x)
        assert torch.equal(out, torch.relu(x))

    def test_strided_projection_shape(self):
        block = Bottleneck(64, 64, 256, stride=2)
        out = block(torch.randn(1, 64, 56, 56))
        assert out.shape == (1, 256, 28, 28)

    def test_channel_mismatch_raises(self):
        block = Bottleneck(8, 4, 8)
        with pytest.raises(ShapeMismatch):
            block(torch.randn(1, 4, 6, 6))

    def test_gradient_matches_central_differences(self):
        torch.manual_seed(1)
        block = Bottleneck(3, 2, 3).double().eval()
        x = torch.randn(1, 3, 4, 4, dtype=torch.float64)

        def loss(t):
            with torch.no_grad():
                return block(t).sum()

        probe = x.clone().requires_grad_(True)
        block(probe).sum().backward()
        numeric = finite_diff_grad(loss, x.clone())
        assert relative_error(probe.grad, numeric) < 1e-3


@pytest.fixture(scope="module")
def extractor():
    torch.manual_seed(0)
    return ResNet50Features().eval()


class TestExtractFeatures:
    def test_stage_shapes_224(self, extractor):
        with torch.no_grad():
            stack = extractor(torch.randn(1, 3, 224, 224))
        assert stack.c5.shape == (1, 2048, 7, 7)
        assert stack.c2.shape == (1, 256, 56, 56)

    def test_stage_shapes_256(self, extractor):
        with torch.no_grad():
            stack = extractor(torch.randn(1, 3, 256, 256))
        assert stack.c2.shape == (1, 256, 64, 64)

    def test_stride_bookkeeping(self, extractor):
        size = 96
        with torch.no_grad():
            stack = extractor(torch.randn(1, 3, size, size))
        for level, stride, channels in zip(
                ("c2", "c3", "c4", "c5"), (4, 8, 16, 32),
                (256, 512, 1024, 2048)):
            t = stack.levels()[level]
            assert t.shape[1:] == (channels, size // stride, size // stride)

    def test_input_too_small(self, extractor):
        with pytest.raises(InputTooSmall):
            extractor(torch.randn(1, 3, 63, 64))

    def test_matches_numpy_reference(self, extractor):
        x = torch.randn(3, 64, 64)
        with torch.no_grad():
            stack = extractor(x.unsqueeze(0))
        ref = extractor_ref(x.numpy().astype(np.float64), extractor)
        for name, tensor in stack.levels().items():
            diff = np.abs(tensor[0].numpy() - ref[name]).max()
            scale = max(np.abs(ref[name]).max(), 1.0)
            assert diff / scale < 1e-4, f"{name} diverges: {diff}"

    def test_torchvision_weights_produce_identical_features(self, tmp_path):
        torchvision = pytest.importorskip("torchvision")
        tv = torchvision.models.resnet50(num_classes=5).eval()
        path = tmp_path / "resnet50.pt"
        torch.save(tv.state_dict(), path)
        extractor = ResNet50Features().eval()
        load_backbone_state(extractor, str(path))
        x = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            ours = extractor(x).c5
            t = tv.maxpool(tv.relu(tv.bn1(tv.conv1(x))))
            theirs = tv.layer4(tv.layer3(tv.layer2(tv.layer1(t))))
        assert torch.equal(ours, theirs)


class TestBaselineClassifier:
    def test_eval_passes_bit_identical(self):
        torch.manual_seed(0)
        model = ResNet50Classifier(num_classes=4, drop_rate=0.5).eval()
        x = torch.randn(2, 3, 64, 64)
        with torch.no_grad():
            assert torch.equal(model(x), model(x))

    def test_dropout_active_in_train_mode(self):
        torch.manual_seed(0)
        model = ResNet50Classifier(num_classes=4, drop_rate=0.5).train()
        x = torch.randn(2, 3, 64, 64)
        assert not torch.equal(model(x), model(x))

    def test_logit_length_matches_class_count(self):
        model = ResNet50Classifier(num_classes=102).eval()
        with torch.no_grad():
            assert model(torch.randn(1, 3, 64, 64)).shape == (1, 102)

    def test_zero_features_give_bias(self):
        model = ResNet50Classifier(num_classes=6).eval()
        with torch.no_grad():
            logits = model.head(torch.zeros(1, 2048, 7, 7))
        assert torch.equal(logits[0], model.fc.bias)

    def test_one_labeled_image_finite_loss(self):
        from pestclf.trainer import cross_entropy
        torch.manual_seed(2)
        model = ResNet50Classifier(num_classes=3)
        loss = cross_entropy(model(torch.randn(1, 3, 64, 64)), torch.tensor([1]))
        assert torch.isfinite(loss)
