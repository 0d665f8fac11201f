import math

import numpy as np
import pytest

from piano import numerics as nx
from piano.model import BACKBONES, DivergenceError, PianoModel
from piano.numerics import Tensor
from piano.problems import get_problem, sample_grid
from piano.training import piano_loss

from conftest import max_rel_error, numeric_grad, tape_grads


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def silu(v):
    return v * sigmoid(v)


def test_parameter_count_near_reported_size():
    model = PianoModel.create("ssm", 256, seed=0)
    assert model.n_parameters() == 329_729
    assert abs(model.n_parameters() - 330_000) <= 33_000


@pytest.mark.parametrize("backbone", BACKBONES)
def test_xavier_bounds_and_zero_biases(backbone):
    model = PianoModel.create(backbone, 16, seed=1)
    k = model.k
    for name, p in model.params.items():
        if name == "ssm.ln_gain":
            assert np.all(p.data == 1.0)
        elif p.data.ndim == 1:
            assert np.all(p.data == 0.0)
        else:
            fan_in = p.shape[0]
            fan_out = k if name.startswith("gru.") else p.shape[1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            assert np.abs(p.data).max() <= bound


def test_embed_examples():
    model = PianoModel.create("ssm", 3, seed=0)
    zero = model.embed(np.zeros((2, 3)))
    assert np.all(zero.data == 0.0)
    W = np.arange(9.0).reshape(3, 3)
    model.params["embed.W"].data = W.copy()
    assert np.array_equal(model.embed(np.array([[1.0, 0.0, 0.0]])).data[0], W[0])
    with pytest.raises(nx.ShapeError):
        model.embed(np.zeros((2, 4)))


def test_embed_matches_affine_formula(rng):
    model = PianoModel.create("ssm", 5, seed=2)
    model.params["embed.b"].data = rng.normal(size=5)
    s = rng.normal(size=(4, 3))
    W, b = model.params["embed.W"].data, model.params["embed.b"].data
    ref = [[sum(s[i, p] * W[p, j] for p in range(3)) + b[j] for j in range(5)] for i in range(4)]
    assert np.max(np.abs(model.embed(s).data - ref)) < 1e-12


def test_ssm_step_trivial_cases(rng):
    model = PianoModel.create("ssm", 4, seed=0)
    for name in ("ssm.A", "ssm.B"):
        model.params[name].data[:] = 0.0
    h, _ = model.step_ssm(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4))))
    assert np.all(h.data == 0.0)
    model = PianoModel.create("ssm", 4, seed=0)
    for name in ("ssm.C", "ssm.D"):
        model.params[name].data[:] = 0.0
    m = Tensor(rng.normal(size=(2, 4)))
    _, o = model.step_ssm(Tensor(rng.normal(size=(2, 4))), m)
    assert np.array_equal(o.data, m.data)


def test_ssm_step_matches_scalar_loop(rng):
    k = 4
    model = PianoModel.create("ssm", k, seed=3)
    p = {n: t.data for n, t in model.params.items()}
    p["ssm.ln_gain"][:] = rng.normal(size=k)
    p["ssm.ln_bias"][:] = rng.normal(size=k)
    hp, m = rng.normal(size=(2, k)), rng.normal(size=(2, k))
    h, o = model.step_ssm(Tensor(hp), Tensor(m))
    for b in range(2):
        pre = [sum(hp[b, q] * p["ssm.A"][q, i] + m[b, q] * p["ssm.B"][q, i] for q in range(k))
               for i in range(k)]
        mu = sum(pre) / k
        var = sum((v - mu) ** 2 for v in pre) / k
        hh = [silu((v - mu) / math.sqrt(var + 1e-5) * p["ssm.ln_gain"][i] + p["ssm.ln_bias"][i])
              for i, v in enumerate(pre)]
        oo = [sum(hh[q] * p["ssm.C"][q, i] + m[b, q] * p["ssm.D"][q, i] for q in range(k)) + m[b, i]
              for i in range(k)]
        assert np.max(np.abs(h.data[b] - hh)) < 1e-12
        assert np.max(np.abs(o.data[b] - oo)) < 1e-12


def test_gru_step_matches_scalar_loop(rng):
    k = 3
    model = PianoModel.create("gru", k, seed=4)
    p = {n: t.data for n, t in model.params.items()}
    p["gru.b"][:] = rng.normal(size=3 * k)
    hp, m = rng.normal(size=(2, k)), rng.normal(size=(2, k))
    h, o = model.step_gru(Tensor(hp), Tensor(m))
    assert h is o
    W, Uzr, Un, bias = p["gru.W"], p["gru.U_zr"], p["gru.U_n"], p["gru.b"]
    for b in range(2):
        z = [sigmoid(sum(m[b, q] * W[q, i] + hp[b, q] * Uzr[q, i] for q in range(k)) + bias[i])
             for i in range(k)]
        r = [sigmoid(sum(m[b, q] * W[q, k + i] + hp[b, q] * Uzr[q, k + i] for q in range(k)) + bias[k + i])
             for i in range(k)]
        n = [math.tanh(sum(m[b, q] * W[q, 2 * k + i] + r[q] * hp[b, q] * Un[q, i] for q in range(k))
                       + bias[2 * k + i]) for i in range(k)]
        ref = [z[i] * hp[b, i] + (1 - z[i]) * n[i] for i in range(k)]
        assert np.max(np.abs(h.data[b] - ref)) < 1e-12


def test_gru_saturated_update_gate_keeps_state(rng):
    model = PianoModel.create("gru", 4, seed=0)
    model.params["gru.b"].data[:4] = 60.0
    hp = rng.normal(size=(3, 4))
    h, _ = model.step_gru(Tensor(hp), Tensor(rng.normal(size=(3, 4))))
    assert np.allclose(h.data, hp, atol=1e-12)


def test_gru_zero_state(rng):
    model = PianoModel.create("gru", 4, seed=0)
    m = rng.normal(size=(2, 4))
    h, _ = model.step_gru(Tensor(np.zeros((2, 4))), Tensor(m))
    W = model.params["gru.W"].data
    z = 1 / (1 + np.exp(-(m @ W[:, :4])))
    cand = np.tanh(m @ W[:, 8:])
    assert np.allclose(h.data, (1 - z) * cand, atol=1e-14)


def test_mlp_step(rng):
    model = PianoModel.create("mlp", 3, seed=0)
    model.params["mlp.b"].data[:] = rng.normal(size=3)
    b = model.params["mlp.b"].data
    h, o = model.step_mlp(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))))
    assert np.allclose(h.data[0], b / (1 + np.exp(-b)), atol=1e-15) and h is o
    # concat order is [h_prev, m]: a basis vector in h_prev picks row 0 of W
    W = model.params["mlp.W"].data
    model.params["mlp.b"].data[:] = 0.0
    h, _ = model.step_mlp(Tensor([[1.0, 0.0, 0.0]]), Tensor(np.zeros((1, 3))))
    assert np.allclose(h.data[0], W[0] / (1 + np.exp(-W[0])))
    h, _ = model.step_mlp(Tensor(np.zeros((1, 3))), Tensor([[1.0, 0.0, 0.0]]))
    assert np.allclose(h.data[0], W[3] / (1 + np.exp(-W[3])))


# ---------------------------------------------------------------- rollout

@pytest.mark.parametrize("backbone", BACKBONES)
def test_rollout_shape_and_ic_anchoring(backbone):
    p = get_problem("heat")
    s = sample_grid(p, 9, 7)
    f = PianoModel.create(backbone, 8, seed=0).rollout(s.grid, s.ic).field
    assert f.shape == (9, 8)
    assert np.array_equal(f.data[:, 0], s.ic)
    assert np.all(np.isfinite(f.data))


def test_zero_probe_gives_ic_then_zeros():
    p = get_problem("reaction")
    s = sample_grid(p, 6, 5)
    model = PianoModel.create("ssm", 4, seed=0)
    model.params["probe.W2"].data[:] = 0.0
    f = model.predict(s.grid, s.ic)
    assert np.array_equal(f[:, 0], s.ic) and np.all(f[:, 1:] == 0.0)


def test_single_step_unrolling():
    p = get_problem("heat")
    g = p.make_grid(5, 4)
    model = PianoModel.create("ssm", 6, seed=2)
    ic = p.ic(g.x)
    s = np.column_stack([g.x, np.full(5, g.t[1]), ic])
    h, o = model.step(Tensor(np.zeros((5, 6))), model.embed(s))
    expected = model.probe(o).data[:, 0]
    assert np.allclose(model.predict(g, ic)[:, 1], expected, rtol=0, atol=1e-14)


@pytest.mark.parametrize("backbone", ["ssm", "gru", "mlp"])
def test_fused_rollout_matches_reference(backbone):
    p = get_problem("heat")
    s = sample_grid(p, 10, 9)
    model = PianoModel.create(backbone, 8, seed=5)
    rng = np.random.default_rng(0)
    perturb = {0: rng.normal(size=10) * 0.01, 4: rng.normal(size=10) * 0.1}
    results = []
    for reference in (False, True):
        def loss():
            f = model.rollout(s.grid, s.ic, perturb=perturb, reference=reference).field
            return piano_loss(f, p, s.grid, first_step=0)[0]
        results.append((float(loss().data), tape_grads(loss, model.parameters())))
    (l1, g1), (l2, g2) = results
    assert abs(l1 - l2) <= 1e-12 * abs(l2)
    for a, b in zip(g1, g2):
        assert max_rel_error(a, b) < 1e-12


def test_teacher_forcing_uses_given_previous_values():
    p = get_problem("reaction")
    s = sample_grid(p, 6, 5)
    model = PianoModel.create("gru", 4, seed=0)
    forced = model.rollout(s.grid, s.ic, teacher_field=s.truth).field.data
    for j in range(1, 6):
        h = Tensor(np.zeros((6, 4)))
        for i in range(1, j + 1):
            inp = np.column_stack([s.grid.x, np.full(6, s.grid.t[i]), s.truth[:, i - 1]])
            h, o = model.step(h, model.embed(inp))
        assert np.allclose(forced[:, j], model.probe(o).data[:, 0], atol=1e-14)


def test_divergence_reports_step():
    p = get_problem("heat")
    s = sample_grid(p, 6, 6)
    model = PianoModel.create("ssm", 4, seed=0)
    with pytest.raises(DivergenceError) as info:
        model.rollout(s.grid, s.ic, perturb={3: np.full(6, np.inf)})
    assert info.value.step == 3
    with pytest.raises(DivergenceError) as info:
        model.rollout(s.grid, s.ic, perturb={3: np.full(6, np.inf)}, reference=True)
    assert info.value.step == 3


def test_ic_length_checked():
    p = get_problem("heat")
    s = sample_grid(p, 6, 6)
    with pytest.raises(nx.ShapeError):
        PianoModel.create("ssm", 4).rollout(s.grid, s.ic[:-1])


def test_predict_refuses_active_tape():
    p = get_problem("heat")
    s = sample_grid(p, 6, 6)
    model = PianoModel.create("ssm", 4)
    with nx.Tape():
        with pytest.raises(RuntimeError):
            model.predict(s.grid, s.ic)


@pytest.mark.parametrize("backbone", ["ssm", "gru", "mlp"])
def test_gradient_reaches_sequence_start(backbone):
    p = get_problem("reaction")
    s = sample_grid(p, 5, 6)
    model = PianoModel.create(backbone, 6, seed=1)
    with nx.Tape() as tape:
        f = model.rollout(s.grid, s.ic).field
        loss = nx.tsum(nx.square(f[:, 1:]))
    # dependence of the first step on the IC goes through the embedding weight row for u
    grads = nx.backward(tape, loss, model.parameters())
    assert np.any(grads[model.params["embed.W"]][2] != 0.0)
    eps = 1e-6
    up = model.predict(s.grid, s.ic + eps)
    down = model.predict(s.grid, s.ic - eps)
    assert np.all(np.abs((up - down)[:, -1]) > 0)


@pytest.mark.parametrize("backbone", BACKBONES)
def test_full_loss_gradient_matches_finite_differences(backbone):
    p = get_problem("heat")
    s = sample_grid(p, 4, 4)
    model = PianoModel.create(backbone, 8, seed=11)
    params = model.parameters()

    def loss():
        return piano_loss(model.rollout(s.grid, s.ic).field, p, s.grid, first_step=0)[0]

    analytic = tape_grads(loss, params)
    numeric = numeric_grad(loss, params)
    worst = max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < 1e-4


# ---------------------------------------------------------------- perturbation sensitivity

def _sensitivity(backbone, j=3, size=1e-3):
    p = get_problem("reaction")
    s = sample_grid(p, 8, 8)
    model = PianoModel.create(backbone, 8, seed=3)
    base = model.predict(s.grid, s.ic)
    delta = np.full(8, size)
    bumped = model.rollout(s.grid, s.ic, perturb={j - 1: delta}).field.data
    return base, bumped


@pytest.mark.parametrize("backbone", ["ssm", "gru", "mlp"])
def test_autoregressive_models_feel_previous_step(backbone):
    base, bumped = _sensitivity(backbone)
    assert np.all(np.abs(bumped[:, 3] - base[:, 3]) > 0)


def test_pointwise_model_ignores_previous_step():
    base, bumped = _sensitivity("nonar")
    assert np.array_equal(bumped[:, 3:], base[:, 3:])


# ---------------------------------------------------------------- persistence

@pytest.mark.parametrize("backbone", BACKBONES)
def test_checkpoint_round_trip(tmp_path, backbone):
    model = PianoModel.create(backbone, 5, seed=9)
    model.meta = {"problem": "heat"}
    path = tmp_path / "ckpt.json"
    model.save(path)
    loaded = PianoModel.load(path)
    assert loaded.backbone == backbone and loaded.meta == {"problem": "heat"}
    for name, p in model.params.items():
        assert np.array_equal(loaded.params[name].data, p.data)


def test_checkpoint_rejects_bad_version_and_shape():
    model = PianoModel.create("ssm", 4)
    manifest = model.to_manifest()
    with pytest.raises(ValueError):
        PianoModel.from_manifest({**manifest, "version": 99})
    manifest["params"]["ssm.A"]["shape"] = [3, 3]
    with pytest.raises(nx.ShapeError):
        PianoModel.from_manifest(manifest)


def test_unknown_backbone():
    with pytest.raises(ValueError):
        PianoModel.create("lstm", 4)
