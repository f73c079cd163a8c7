import numpy as np
import pytest
import torch
import torch.nn.functional as F

from pssr import models as M
from pssr.data import ImageBatch

from conftest import ConstantModel, LinearSoftmax, separable_batches


def test_train_config_validation():
    with pytest.raises(ValueError):
        M.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        M.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        M.TrainConfig(optimizer="sgd")


def test_predict_probs_rows_sum_to_one(small_batch):
    model = M.build_model("lenet5", seed=0)
    probs = M.predict_probs(model, small_batch.images)
    assert probs.shape == (12, 10)
    assert torch.allclose(probs.sum(dim=1), torch.ones(12), atol=1e-5)


def test_uniform_model_gives_uniform_rows(small_batch):
    model = M.build_model("lenet5", seed=0)
    with torch.no_grad():
        model.fc3.weight.zero_()
        model.fc3.bias.zero_()
    probs = M.predict_probs(model, small_batch.images)
    assert torch.allclose(probs, torch.full_like(probs, 0.1), atol=1e-7)


def test_predict_probs_shape_check():
    model = M.build_model("substitute_mlp", input_shape=(1, 4, 4), seed=0)
    with pytest.raises(ValueError, match="N,C,H,W"):
        M.predict_probs(model, torch.rand(4, 16))


def test_constant_model_zero_gradient(small_batch):
    model = ConstantModel(torch.arange(10).float())
    grad = M.input_gradient(model, small_batch.images, target="predicted_prob")
    assert torch.equal(grad, torch.zeros_like(small_batch.images))


def test_linear_softmax_analytic_gradient():
    # For probability p_c of the argmax class c: dp_c/dx = p_c (w_c - sum_j p_j w_j)
    g = torch.Generator().manual_seed(3)
    w = torch.randn((4, 9), generator=g)
    model = LinearSoftmax(9, 4, weight=w).double()
    x = torch.rand((5, 1, 3, 3), generator=g).double()
    grad = M.input_gradient(model, x, target="predicted_prob")
    probs = F.softmax(model(x), dim=1)
    c = probs.argmax(dim=1)
    w = model.fc.weight
    expected = (probs.gather(1, c.unsqueeze(1)) * (w[c] - probs @ w)).view_as(x)
    assert torch.allclose(grad, expected, atol=1e-10)


def _finite_difference(scalar_fn, x, indices, h=1e-5):
    grads = []
    for idx in indices:
        xp = x.clone()
        xm = x.clone()
        xp[idx] += h
        xm[idx] -= h
        grads.append((scalar_fn(xp) - scalar_fn(xm)) / (2 * h))
    return torch.tensor(grads, dtype=x.dtype)


@pytest.mark.parametrize("arch,shape", [("lenet5", (1, 28, 28)),
                                        ("substitute_mlp", (1, 12, 12)),
                                        ("resnet18_small", (3, 16, 16))])
@pytest.mark.parametrize("target", ["predicted_prob", "loss"])
def test_input_gradient_matches_finite_differences(arch, shape, target):
    model = M.build_model(arch, num_classes=10, input_shape=shape, seed=0).double().eval()
    g = torch.Generator().manual_seed(8)
    x = torch.rand((2, *shape), generator=g).double()
    labels = torch.tensor([1, 7])
    grad = M.input_gradient(model, x, target=target, labels=labels)

    with torch.no_grad():
        pred = model(x).argmax(dim=1)

    def scalar(xq):
        with torch.no_grad():
            logits = model(xq)
            if target == "predicted_prob":
                return F.softmax(logits, dim=1).gather(1, pred.unsqueeze(1)).sum().item()
            return F.cross_entropy(logits, labels, reduction="sum").item()

    rng = np.random.default_rng(0)
    flat_positions = rng.choice(x.numel(), size=120, replace=False)
    indices = [np.unravel_index(p, x.shape) for p in flat_positions]
    fd = _finite_difference(scalar, x, indices)
    analytic = torch.tensor([grad[idx] for idx in indices], dtype=torch.float64)
    rel = (fd - analytic).abs() / analytic.abs().clamp_min(1e-6)
    assert rel.max() < 1e-3


def test_input_gradient_unsupported_wrapper(small_batch):
    class DetachedModel(torch.nn.Module):
        def forward(self, x):
            return (x.sum(dim=(1, 2, 3), keepdim=True) * torch.ones(1, 10)).detach()

    with pytest.raises(M.GradientUnavailableError):
        M.input_gradient(DetachedModel(), small_batch.images)


def test_input_gradient_argument_validation(small_batch):
    model = M.build_model("lenet5", seed=0)
    with pytest.raises(ValueError, match="unknown gradient target"):
        M.input_gradient(model, small_batch.images, target="hessian")
    with pytest.raises(ValueError, match="requires labels"):
        M.input_gradient(model, small_batch.images, target="loss")


def test_training_learns_separable_toy():
    batches = separable_batches()
    model = M.build_model("substitute_mlp", num_classes=2, input_shape=(1, 12, 12), seed=0)
    history = M.train_classifier(model, batches, M.TrainConfig(epochs=3, seed=0),
                                 val_batches=batches)
    assert all(np.isfinite(history["loss"]))
    assert history["clean_accuracy"] >= 0.95


def test_training_diverged_reports_step_and_lr():
    batches = separable_batches()
    model = M.build_model("substitute_mlp", num_classes=2, input_shape=(1, 12, 12), seed=0)
    with pytest.raises(M.TrainingDivergedError, match=r"step \d+ \(lr=1e\+30\)"):
        M.train_classifier(model, batches, M.TrainConfig(learning_rate=1e30, epochs=2, seed=0))


def test_training_determinism_same_seed():
    batches = separable_batches()
    final = []
    for _ in range(2):
        model = M.build_model("substitute_mlp", num_classes=2, input_shape=(1, 12, 12), seed=9)
        M.train_classifier(model, batches, M.TrainConfig(epochs=2, seed=9))
        final.append({k: v.clone() for k, v in model.state_dict().items()})
    for key in final[0]:
        assert torch.equal(final[0][key], final[1][key])


def test_checkpoint_round_trip(tmp_path, small_batch):
    model = M.build_model("lenet5", seed=0)
    path = tmp_path / "model.pt"
    M.save_checkpoint(model, path, meta={"note": "probe"})
    loaded = M.load_checkpoint(path)
    assert torch.equal(M.predict_logits(loaded, small_batch.images),
                       M.predict_logits(model, small_batch.images))
    assert loaded.architecture == "lenet5"
    assert loaded.num_classes == 10


def test_checkpoint_architecture_mismatch(tmp_path):
    model = M.build_model("lenet5", seed=0)
    path = tmp_path / "model.pt"
    M.save_checkpoint(model, path)
    with pytest.raises(M.CheckpointError, match=r"expected 'substitute_mlp', found 'lenet5'"):
        M.load_checkpoint(path, expected_architecture="substitute_mlp")


def test_checkpoint_missing_and_malformed(tmp_path):
    with pytest.raises(M.CheckpointError, match="missing"):
        M.load_checkpoint(tmp_path / "nope.pt")
    bad = tmp_path / "bad.pt"
    torch.save({"format": "other"}, bad)
    with pytest.raises(M.CheckpointError, match="not a pssr-classifier"):
        M.load_checkpoint(bad)
