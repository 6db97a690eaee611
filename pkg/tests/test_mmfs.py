import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mminterleaved.checks import (
    attention_mass_error,
    mmfs_oracle_error,
    mmfs_oracle_value,
    random_mmfs_case,
    random_pyramid,
)
from mminterleaved.mmfs import (
    MMFS,
    CapacityError,
    EmptyVisibility,
    SamplingPlan,
    apply_gated,
    deform_attn,
    plan,
)
from mminterleaved.numcore import CHECK_DTYPE, DimensionError, gradcheck, make_rng, randn
from mminterleaved.pyramid import ImagePyramid

D = CHECK_DTYPE
GRID = [(M, L, K) for M in (1, 2, 3) for L in (1, 3) for K in (1, 4)]


def fresh(M=2, L=3, K=4, C=4, variant="llm", seed=0):
    rng = make_rng(seed)
    return MMFS(C, C, L, K, max(M, 1), 1, variant, rng, D), rng


# ------------------------------------------------------------------ init contract


def test_zero_init_fields():
    p, _ = fresh()
    for name in ("w_p", "b_p", "w_a", "b_a", "alpha"):
        assert float(getattr(p, name).detach().abs().max()) == 0
    d, _ = fresh(variant="decoder")
    assert float(d.conv_w.detach().abs().max()) == 0 and float(d.conv_b.detach().abs().max()) == 0


def test_zero_init_plan_is_uniform_at_ref():
    p, rng = fresh(M=2, L=3, K=4)
    pl = plan(randn(rng, (4,), 1, D), (0.3, 0.6), [4, 9], p)
    assert pl.locations.shape == (2, 3, 4, 2) and pl.weights.shape == (2, 3, 4)
    assert torch.equal(pl.locations, torch.tensor([0.3, 0.6], dtype=D).expand(2, 3, 4, 2))
    assert torch.allclose(pl.weights, torch.full((2, 3, 4), 1 / 24, dtype=D), atol=1e-15)
    assert pl.visible == [9, 4]  # most recent first


def test_equal_logits_quarter_weights():
    p, rng = fresh(M=2, L=1, K=2)
    with torch.no_grad():
        p.b_a.fill_(1.7)
        p.w_q.copy_(randn(rng, p.w_q.shape, 1, D))
    pl = plan(randn(rng, (4,), 1, D), (0.5, 0.5), [0, 1], p)
    assert torch.allclose(pl.weights, torch.full((2, 1, 2), 0.25, dtype=D), atol=1e-15)


def test_plan_errors():
    p, rng = fresh(M=2)
    with pytest.raises(EmptyVisibility):
        plan(torch.zeros(4, dtype=D), (0.5, 0.5), [], p)
    with pytest.raises(CapacityError):
        plan(torch.zeros(4, dtype=D), (0.5, 0.5), [0, 1, 2], p)


def test_constructor_validation():
    rng = make_rng(0)
    with pytest.raises(ValueError):
        MMFS(4, 4, 0, 4, 2, 1, "llm", rng)
    with pytest.raises(ValueError):
        MMFS(4, 4, 1, 4, 2, 1, "other", rng)
    with pytest.raises(DimensionError):
        MMFS(4, 8, 1, 4, 2, 1, "llm", rng)


# ------------------------------------------------------------------ oracle agreement


def test_plan_and_attention_vs_loop_oracle():
    rng = make_rng(42)
    case = random_mmfs_case(rng, 2, 3, 4)
    got = deform_attn(case.pyramids, plan(case.f_q, case.ref, case.visible, case.params))
    assert np.abs(got.detach().numpy() - mmfs_oracle_value(case)).max() <= 1e-10


def test_random_m3_l3_k4_vs_loop_oracle():
    rng = make_rng(43)
    for _ in range(5):
        case = random_mmfs_case(rng, 3, 3, 4)
        got = deform_attn(case.pyramids, plan(case.f_q, case.ref, case.visible, case.params))
        assert np.abs(got.detach().numpy() - mmfs_oracle_value(case)).max() <= 1e-10


def test_oracle_sweep_over_grid():
    err, n = mmfs_oracle_error(96)
    assert n == 96 and err <= 1e-10


def _single_map_oracle(fmap, f_q, ref, P):
    """Independent single-image single-scale deformable attention in plain numpy."""
    q = P["w_q"] @ f_q + P["b_q"] + P["pos_embed"][0]
    K = P["w_a"].shape[0]
    offs = (P["w_p"] @ q + P["b_p"]).reshape(K, 2)
    logits = P["w_a"] @ q + P["b_a"]
    w = np.exp(logits - logits.max())
    w /= w.sum()
    H, W, C = fmap.shape
    out = np.zeros(C)
    for k in range(K):
        x = (ref[0] + offs[k, 0]) * W - 0.5
        y = (ref[1] + offs[k, 1]) * H - 0.5
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        for yy in (y0, y0 + 1):
            for xx in (x0, x0 + 1):
                if 0 <= yy < H and 0 <= xx < W:
                    out += w[k] * (1 - abs(x - xx)) * (1 - abs(y - yy)) * fmap[yy, xx]
    return out


@pytest.mark.parametrize("seed", range(10))
def test_single_image_single_scale_reduction(seed):
    rng = make_rng(seed)
    case = random_mmfs_case(rng, 1, 1, 4)
    P = {k: v.detach().numpy() for k, v in case.params.named_parameters()}
    fmap = case.pyramids[case.visible[0]].levels[0].numpy()
    got = deform_attn(case.pyramids, plan(case.f_q, case.ref, case.visible, case.params))
    ref = _single_map_oracle(fmap, case.f_q.numpy(), case.ref, P)
    assert np.abs(got.detach().numpy() - ref).max() <= 1e-10


# ------------------------------------------------------------------ invariants


@given(st.integers(0, 10_000), st.sampled_from(GRID))
def test_normalisation_and_level_sharing(seed, mlk):
    M, L, K = mlk
    case = random_mmfs_case(make_rng(seed), M, L, K)
    pl = plan(case.f_q, case.ref, case.visible, case.params)
    assert (pl.weights >= 0).all()
    assert abs(float(pl.weights.detach().sum()) - 1) <= 1e-6
    assert torch.equal(pl.locations, pl.locations[:, :1].expand_as(pl.locations))


def test_normalisation_many_queries_32bit():
    assert attention_mass_error(10_000) <= 1e-6


@given(st.integers(0, 10_000), st.sampled_from(GRID))
def test_locality_of_visibility(seed, mlk):
    M, L, K = mlk
    rng = make_rng(seed)
    case = random_mmfs_case(rng, M, L, K)
    out = apply_gated(case.f_q, case.ref, case.visible, case.pyramids, case.params)
    others = dict(case.pyramids)
    for i in range(10, 13):
        others[i] = random_pyramid(rng, L, 4)
    out2 = apply_gated(case.f_q, case.ref, case.visible, others, case.params)
    assert torch.equal(out, out2)


@given(st.floats(-5, 5), st.sampled_from(GRID), st.integers(0, 1000))
def test_constant_pyramids_return_constant(c, mlk, seed):
    M, L, K = mlk
    p, rng = fresh(M, L, K, seed=seed)
    # keep sampling points strictly inside every map so zero padding never bites
    pyrs = {i: ImagePyramid([torch.full((8, 8, 4), c, dtype=D) for _ in range(L)], (0, 0)) for i in range(M)}
    with torch.no_grad():
        p.w_a.copy_(randn(rng, p.w_a.shape, 1, D))
    out = deform_attn(pyrs, plan(randn(rng, (4,), 1, D), (0.5, 0.5), list(range(M)), p))
    assert torch.allclose(out, torch.full((4,), c, dtype=D), atol=1e-12)


def _delta_plan(row, col, H, W, C):
    loc = torch.tensor([[[[(col + 0.5) / W, (row + 0.5) / H]]]], dtype=D)
    return SamplingPlan(loc, torch.ones(1, 1, 1, dtype=D), [0])


def test_delta_plan_picks_pixel(rng):
    fmap = randn(rng, (4, 6, 3), 1, D)
    pyr = {0: ImagePyramid([fmap], (0, 0))}
    assert torch.allclose(deform_attn(pyr, _delta_plan(2, 5, 4, 6, 3)), fmap[2, 5], atol=1e-14)


def test_saturated_gate_delta_plan():
    """alpha = 10 and a plan that puts all mass on one pixel centre -> f_q + that pixel."""
    rng = make_rng(9)
    H, W, C = 4, 4, 4
    p = MMFS(C, C, 1, 1, 1, 1, "llm", rng, D)
    fmap = randn(rng, (H, W, C), 1, D)
    row, col = 1, 2
    with torch.no_grad():
        p.alpha.fill_(10.0)
        # W_p = 0, bias shifts the reference (0.5, 0.5) onto the pixel centre
        p.b_p.copy_(torch.tensor([(col + 0.5) / W - 0.5, (row + 0.5) / H - 0.5], dtype=D))
    f_q = randn(rng, (C,), 1, D)
    out = apply_gated(f_q, (0.5, 0.5), [0], {0: ImagePyramid([fmap], (0, 0))}, p, "llm")
    assert torch.allclose(out, f_q + fmap[row, col], atol=1e-4)


def test_gates_at_init_are_identity(rng):
    for variant in ("llm", "decoder"):
        p = MMFS(4, 4, 2, 2, 2, 1, variant, rng, D)
        pyrs = {0: random_pyramid(rng, 2, 4), 1: random_pyramid(rng, 2, 4)}
        f_q = randn(rng, (4,), 1, D)
        assert torch.equal(apply_gated(f_q, (0.2, 0.9), [0, 1], pyrs, p, variant), f_q)


def test_empty_visibility_passes_through(rng):
    p, _ = fresh()
    with torch.no_grad():
        p.alpha.fill_(1.0)
    f_q = randn(rng, (4,), 1, D)
    assert torch.equal(apply_gated(f_q, (0.5, 0.5), [], {}, p), f_q)


def test_variant_mismatch_rejected(rng):
    p, _ = fresh()
    with pytest.raises(ValueError):
        apply_gated(torch.zeros(4, dtype=D), (0.5, 0.5), [0], {0: random_pyramid(rng, 3, 4)}, p, "decoder")


def test_dimension_mismatch(rng):
    p, _ = fresh(M=2, L=3)
    pl = plan(randn(rng, (4,), 1, D), (0.5, 0.5), [0, 1], p)
    with pytest.raises(DimensionError):
        deform_attn({0: random_pyramid(rng, 3, 4), 1: random_pyramid(rng, 3, 5)}, pl)
    with pytest.raises(DimensionError):
        deform_attn({0: random_pyramid(rng, 2, 4), 1: random_pyramid(rng, 2, 4)}, pl)


def test_batched_forward_matches_single_query(rng):
    """The batched path used inside the models equals per-query apply_gated."""
    p = MMFS(4, 4, 2, 3, 3, 1, "llm", rng, D)
    from mminterleaved.checks import randomize_gates

    randomize_gates(p, rng)
    sides = (4, 2)
    bank = [randn(rng, (3, s, s, 4), 1, D) for s in sides]
    pyrs = {i: ImagePyramid([bank[l][i] for l in range(2)], (0, 0)) for i in range(3)}
    f_q = randn(rng, (3, 4), 1, D)
    ref = torch.full((3, 2), 0.5, dtype=D)
    # row 0 sees image 0; row 1 sees 0,1; row 2 sees 0,1,2 -> slots in recency order
    img_idx = torch.tensor([[0, 0, 0], [1, 0, 0], [2, 1, 0]])
    valid = torch.tensor([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=torch.bool)
    out = p(f_q, ref, img_idx, valid, bank)
    for r, vis in enumerate(([0], [0, 1], [0, 1, 2])):
        ref_out = apply_gated(f_q[r], (0.5, 0.5), vis, pyrs, p)
        assert torch.allclose(out[r], ref_out, atol=1e-12)


def test_multi_head_shapes(rng):
    p = MMFS(8, 8, 2, 2, 2, 2, "llm", rng, D)
    pl = plan(randn(rng, (8,), 1, D), (0.5, 0.5), [0, 1], p)
    assert pl.locations.shape == (2, 2, 2, 2, 2) and pl.weights.shape == (2, 2, 2, 2)
    assert torch.allclose(pl.weights.sum(dim=(1, 2, 3)), torch.ones(2, dtype=D))
    out = deform_attn({0: random_pyramid(rng, 2, 8), 1: random_pyramid(rng, 2, 8)}, pl)
    assert out.shape == (8,)


# ------------------------------------------------------------------ gradients


@pytest.mark.parametrize("idx", range(24))
def test_full_gradcheck(idx):
    M, L, K = GRID[idx % len(GRID)]
    rng = make_rng(1000 + idx)
    case = random_mmfs_case(rng, M, L, K)
    leaves = {f"param.{k}": v for k, v in case.params.named_parameters()}
    leaves["f_q"] = case.f_q.requires_grad_(True)
    for i, p in case.pyramids.items():
        for l, lv in enumerate(p.levels):
            leaves[f"pyr{i}.{l}"] = lv.requires_grad_(True)
    w = randn(rng, (4,), 1, D)

    def f(_):
        pl = plan(case.f_q, case.ref, case.visible, case.params)
        return (apply_gated(case.f_q, case.ref, case.visible, case.pyramids, case.params) * w).sum() + 0 * pl.weights.sum()

    rep = gradcheck(f, leaves, eps=1e-5, tol=1e-5)
    assert rep.passed, str(rep)
