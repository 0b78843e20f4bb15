from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clcn import autodiff as ad
from clcn.core import Banks
from clcn.data import BatchSampler, LabelAudit, gen_shifted_gaussians, sample_batch
from clcn.errors import ContractError, LengthError, OptimizerError, TrainingError
from clcn.model import Architecture, embed, init_params, logits
from clcn.trainer import (
    TRACE_FIELDS,
    VARIANT_HELP,
    VARIANTS,
    TrainConfig,
    load_checkpoint,
    run_variant,
    save_checkpoint,
    sgd_step,
    train,
)

ARCH = Architecture(2, (16,), 8, 4)


@pytest.fixture(scope="module")
def domains():
    return gen_shifted_gaussians(4, 40, 2, shift=2.0, rotation=np.deg2rad(30), noise=0.25, seed=0)


def small_cfg(**kw):
    base = dict(arch=ARCH, batch_size=32, episodes=40, eval_every=10, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# -- sgd ---------------------------------------------------------------------------------


def test_sgd_plain_step():
    (p,), _ = sgd_step([np.array(1.0)], [np.array(1.0)], 0.1, 0.0, 0.0, [np.array(0.0)])
    assert p == pytest.approx(0.9)


@pytest.mark.parametrize("momentum", [0.0, 0.5, 0.9])
def test_sgd_zero_grad_keeps_params(momentum):
    p0 = np.array([1.5, -2.0])
    (p,), (v,) = sgd_step([p0], [np.zeros(2)], 0.1, momentum, 0.0, [np.zeros(2)])
    np.testing.assert_array_equal(p, p0)


def test_sgd_momentum_hand_iteration():
    p, v = [np.array(0.0)], [np.array(0.0)]
    p, v = sgd_step(p, [np.array(1.0)], 0.1, 0.9, 0.0, v)
    assert p[0] == pytest.approx(-0.1)
    p, v = sgd_step(p, [np.array(1.0)], 0.1, 0.9, 0.0, v)
    assert p[0] == pytest.approx(-0.29)


def test_sgd_weight_decay_is_coupled():
    (p,), (v,) = sgd_step([np.array(2.0)], [np.array(0.0)], 0.1, 0.0, 0.5, [np.array(0.0)])
    assert v == pytest.approx(1.0) and p == pytest.approx(1.9)


def test_sgd_non_finite_gradient_names_the_episode():
    with pytest.raises(OptimizerError) as err:
        sgd_step([np.ones(2)], [np.array([1.0, np.nan])], 0.1, 0.9, 0.0, [np.zeros(2)], episode=17)
    assert err.value.episode == 17 and "17" in str(err.value)


def test_sgd_shape_mismatch():
    with pytest.raises(ContractError):
        sgd_step([np.ones(2)], [np.ones(3)], 0.1, 0.9, 0.0, [np.zeros(2)])


@given(st.floats(0.1, 10), st.floats(0.01, 0.99), st.floats(-5, 5))
def test_sgd_decreases_convex_quadratic(curvature, lr_fraction, start):
    lr = lr_fraction * 2 / curvature
    p, v = [np.array(start)], [np.array(0.0)]
    loss = 0.5 * curvature * start**2
    for _ in range(20):
        p, v = sgd_step(p, [curvature * p[0]], lr, 0.0, 0.0, v)
        new = 0.5 * curvature * float(p[0]) ** 2
        assert new <= loss + 1e-12
        loss = new


# -- config ----------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw", [dict(episodes=0), dict(momentum=1.0), dict(weight_decay=-1e-4), dict(variant="dann"), dict(fixed_alpha=-1.0)]
)
def test_train_config_invariants(kw):
    with pytest.raises(ContractError):
        small_cfg(**kw)


def test_every_variant_is_documented():
    assert set(VARIANT_HELP) == set(VARIANTS)


# -- training ----------------------------------------------------------------------------


def test_same_seed_same_trace(domains):
    a = train(*domains, small_cfg())
    b = train(*domains, small_cfg())
    assert [r.as_tuple() for r in a.trace] == [r.as_tuple() for r in b.trace]
    for x, y in zip(a.params.tensors(), b.params.tensors()):
        assert x.tobytes() == y.tobytes()


def test_trace_is_ordered_and_finite(domains):
    run = train(*domains, small_cfg())
    episodes = [r.episode for r in run.trace]
    assert episodes == sorted(set(episodes)) and episodes[-1] == 40
    assert all(np.isfinite(r.as_tuple()).all() for r in run.trace)
    assert run.final is run.trace[-1]


def test_zero_alpha_follows_source_only_trajectory(domains):
    plain = train(*domains, small_cfg(variant="source-only", eval_every=1))
    for variant in ("clcn", "ncc-finetune", "cycle-plus-finetune"):
        zero = train(*domains, small_cfg(variant=variant, fixed_alpha=0.0, eval_every=1))
        np.testing.assert_allclose([r.loss_c for r in zero.trace], [r.loss_c for r in plain.trace], atol=1e-6)
        for x, y in zip(zero.params.tensors(), plain.params.tensors()):
            np.testing.assert_allclose(x, y, atol=1e-6)


def test_source_only_is_a_plain_classifier_run(domains):
    source, target = domains
    cfg = small_cfg(variant="source-only")
    run = train(source, target, cfg)
    init_seed, src_seed, _, _ = np.random.SeedSequence(cfg.seed).generate_state(4)
    params = init_params(ARCH, int(init_seed))
    velocity = [np.zeros_like(t) for t in params.tensors()]
    sampler = BatchSampler(cfg.batch_size, int(src_seed))
    for t in range(1, cfg.episodes + 1):
        xs, ys = sample_batch(source, sampler)
        tape = ad.Tape()
        leaves = [tape.watch(p) for p in params.tensors()]
        q = params.with_tensors(leaves)
        grads = tape.backward(ad.softmax_cross_entropy(logits(q, embed(q, xs)), ys))
        new, velocity = sgd_step(params.tensors(), [grads[x] for x in leaves], 0.01, 0.9, 5e-4, velocity)
        params = params.with_tensors(new)
    for x, y in zip(run.params.tensors(), params.tensors()):
        np.testing.assert_allclose(x, y, atol=1e-6)


def test_variants_share_trace_schema(domains):
    for variant in VARIANTS:
        run = run_variant(*domains, small_cfg(episodes=20), variant)
        assert run.config.variant == variant
        assert [tuple(vars(r)) for r in run.trace] == [TRACE_FIELDS] * 2


def test_source_only_keeps_alpha_zero(domains):
    run = train(*domains, small_cfg(variant="source-only"))
    assert all(r.alpha == 0.0 and r.loss_cyc == 0.0 for r in run.trace)


def test_softmax_cycle_trains_a_second_head(domains):
    run = train(*domains, small_cfg(variant="softmax-cycle"))
    assert list(run.params.extra_heads) == ["target"]


@pytest.mark.parametrize("variant", VARIANTS)
def test_training_never_reads_target_labels(domains, variant):
    source, target = domains
    audited = LabelAudit(target)
    run = train(source, audited, small_cfg(variant=variant, episodes=20))
    assert audited.label_reads == 0
    assert not np.isnan(run.final.tgt_acc)  # evaluation did see the labels


def test_divergence_aborts_with_diagnostic(domains):
    from clcn.core import ScheduleConfig

    with pytest.raises(TrainingError, match="episode"):
        train(*domains, small_cfg(schedule=ScheduleConfig(lr0=1e30), episodes=50))


def test_unlabeled_source_is_rejected(domains):
    source, target = domains
    with pytest.raises(ContractError):
        train(replace(source, labels=None), target, small_cfg())


# -- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_round_trip_with_banks_and_velocity(domains, tmp_path):
    run = train(*domains, small_cfg(variant="softmax-cycle"))
    save_checkpoint(tmp_path / "c.bin", run.params, run.banks, run.velocity)
    params, banks, velocity = load_checkpoint(tmp_path / "c.bin")
    for a, b in zip(run.params.tensors(), params.tensors()):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(run.velocity, velocity):
        assert a.tobytes() == b.tobytes()
    for mine, theirs in ((run.banks.source, banks.source), (run.banks.target, banks.target)):
        assert mine.centroids.tobytes() == theirs.centroids.tobytes()
        np.testing.assert_array_equal(mine.initialized, theirs.initialized)
        assert theirs.theta == pytest.approx(0.7)


def test_checkpoint_without_extras(tmp_path):
    save_checkpoint(tmp_path / "c.bin", init_params(ARCH, 0))
    _, banks, velocity = load_checkpoint(tmp_path / "c.bin")
    assert banks is None and velocity is None


def test_truncated_checkpoint(domains, tmp_path):
    run = train(*domains, small_cfg(episodes=10))
    save_checkpoint(tmp_path / "c.bin", run.params, run.banks, run.velocity)
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(LengthError):
        load_checkpoint(tmp_path / "t.bin")


def test_banks_are_empty_before_training():
    b = Banks.empty(3, 2)
    assert not b.source.ready and not b.target.ready
