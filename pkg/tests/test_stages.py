import math
import random
import statistics

import pytest
from hypothesis import given, settings, strategies as st

from mofsteer.database import CampaignDatabase
from mofsteer.domain import AnchorType, GeneratorState, MofRecord, MofStage, StageKind
from mofsteer.stages import (
    MAX_TRAINING_SET,
    MIN_TRAINING_SET,
    QualityModel,
    StepModel,
    adsorption_outcome,
    charges_outcome,
    default_stage_models,
    generate_linker_batch,
    retrain_duration,
    retrain_update,
    sample_duration,
    select_training_set,
    simulate_chain,
    stability_outcome,
)

MODELS = default_stage_models()


def _mof(i, strain=None, capacity=None, quality=0.5):
    m = MofRecord.assembled(i, (10 * i, 10 * i + 1), 0.0, quality)
    m = m.advance(MofStage.AssemblyChecked, 1.0).advance(MofStage.PreSimChecked, 2.0)
    if strain is None:
        return m
    m = m.advance(MofStage.StabilityKnown, 3.0, strain=strain)
    if capacity is not None:
        m = m.advance(MofStage.CellOptimized, 4.0).advance(MofStage.ChargesKnown, 5.0)
        m = m.advance(MofStage.CapacityKnown, 6.0, capacity=capacity)
    return m


# default models -----------------------------------------------------------------


def test_pass_probabilities_from_remain_column():
    assert MODELS[StageKind.ProcessLinkers].conditional_pass_probability == pytest.approx(0.228)
    validate = MODELS[StageKind.ValidateStructure]
    assert validate.step("presim").pass_probability == pytest.approx(15.20 / 99.90)
    assert validate.step("presim").pass_probability == pytest.approx(0.1522, abs=5e-5)
    assert validate.step("stability").pass_probability == pytest.approx(0.5658, abs=5e-5)


def test_mean_durations():
    means = {s: m.mean_duration for s, m in MODELS.items()}
    assert means[StageKind.GenerateLinkers] == 0.37
    assert means[StageKind.AssembleMofs] == pytest.approx(0.46 + 2.56)
    assert means[StageKind.ValidateStructure] == pytest.approx(19.98 + 204.52)
    assert means[StageKind.OptimizeCells] == 1517.53
    assert means[StageKind.EstimateAdsorption] == pytest.approx(211.78 + 1892.89)
    assert means[StageKind.Retrain] == 96.50


def test_step_model_validation():
    with pytest.raises(ValueError):
        StepModel("x", 0.0)
    with pytest.raises(ValueError):
        StepModel("x", 1.0, 1.5)
    with pytest.raises(KeyError):
        MODELS[StageKind.Retrain].step("missing")


# durations ------------------------------------------------------------------------


def test_zero_jitter_is_exact():
    model = MODELS[StageKind.OptimizeCells]
    flat = type(model)(model.stage, model.steps, model.resource, duration_jitter_sigma=0.0)
    assert sample_duration(flat, random.Random(0)) == 1517.53


def test_stability_sample_mean_within_two_percent(rng):
    samples = [sample_duration((MODELS[StageKind.ValidateStructure], "stability"), rng) for _ in range(10_000)]
    assert abs(statistics.fmean(samples) / 204.52 - 1) < 0.02
    assert min(samples) > 0


def test_per_item_steps_scale_with_items():
    flat = type(MODELS[StageKind.GenerateLinkers])(
        StageKind.GenerateLinkers, MODELS[StageKind.GenerateLinkers].steps,
        MODELS[StageKind.GenerateLinkers].resource, duration_jitter_sigma=0.0,
    )
    assert sample_duration(flat, random.Random(0), items=64) == pytest.approx(0.37 * 64)


def test_duration_is_deterministic_given_rng_state():
    model = MODELS[StageKind.AssembleMofs]
    assert sample_duration(model, random.Random(9)) == sample_duration(model, random.Random(9))


@settings(max_examples=200)
@given(st.sampled_from(list(StageKind)), st.integers(0, 2**31))
def test_durations_strictly_positive(stage, seed):
    assert sample_duration(MODELS[stage], random.Random(seed)) > 0


# linker generation ------------------------------------------------------------------


def test_empty_batch_rejected(rng):
    with pytest.raises(ValueError):
        generate_linker_batch(GeneratorState(), 0, AnchorType.BCA, rng)


def test_batch_contract(rng):
    batch = generate_linker_batch(GeneratorState(version=3), 64, AnchorType.BCA, rng)
    assert len(batch) == 64
    assert {l.anchor_type for l in batch} == {AnchorType.BCA}
    assert len({l.id for l in batch}) == 64
    assert {l.model_version for l in batch} == {3}
    assert all(0 <= l.latent_quality <= 1 for l in batch)


def test_better_generator_makes_better_linkers(rng):
    lo = generate_linker_batch(GeneratorState(quality=0.0), 10_000, AnchorType.BZN, rng)
    hi = generate_linker_batch(GeneratorState(quality=1.0), 10_000, AnchorType.BZN, rng)
    assert statistics.fmean(l.latent_quality for l in hi) > statistics.fmean(l.latent_quality for l in lo)


# stability -------------------------------------------------------------------------


class _FixedGauss:
    """rng stub whose normal draw lands exactly on a chosen strain."""

    def __init__(self, z):
        self.z = z

    def gauss(self, mu, sigma):
        return self.z


def _strain_draw(strain, qm=QualityModel(), quality=0.5):
    z = math.log(strain / qm.strain_median(quality)) / qm.strain_sigma
    return stability_outcome(None, quality, qm, _FixedGauss(z))


def test_strict_and_training_thresholds():
    s, training, strict = _strain_draw(0.09)
    assert s == pytest.approx(0.09)
    assert training and strict
    s, training, strict = _strain_draw(0.25 * (1 + 1e-12))
    assert not training and not strict
    assert _strain_draw(0.2)[1:] == (True, False)


def test_stability_requires_presim_check():
    with pytest.raises(ValueError):
        stability_outcome(MofRecord.assembled(1, (1,), 0.0), 0.5, QualityModel(), random.Random(0))


def _strict_fraction(q, qm, rng, n=10_000):
    linkers = generate_linker_batch(GeneratorState(quality=q), n * 8, AnchorType.BCA, rng, qm)
    hits = 0
    for i in range(n):
        quality = statistics.fmean(l.latent_quality for l in linkers[8 * i:8 * i + 8])
        hits += stability_outcome(None, quality, qm, rng)[2]
    return hits / n


def test_untrained_population_strict_fraction(rng):
    assert abs(_strict_fraction(0.0, QualityModel(), rng) - 0.05) <= 0.01


def test_fully_trained_population_reaches_ceiling(rng):
    qm = QualityModel()
    assert abs(_strict_fraction(1.0, qm, rng) - qm.max_stable_fraction) <= 0.01


def test_training_pass_fraction_untrained(rng):
    qm = QualityModel()
    hits = sum(stability_outcome(None, qm.mean_linker_quality(0.0), qm, rng)[1] for _ in range(10_000))
    assert abs(hits / 10_000 - 8.60 / 15.20) < 0.015


@given(st.floats(0, 1), st.floats(0, 1))
def test_stable_fraction_bounded_and_monotone(a, b):
    qm = QualityModel()
    lo, hi = sorted((a, b))
    assert qm.base_stable_fraction <= qm.stable_fraction(lo) <= qm.stable_fraction(hi) <= qm.max_stable_fraction


@given(st.floats(0.3, 0.7), st.floats(0.3, 0.7))
def test_strain_median_falls_with_linker_quality(a, b):
    qm = QualityModel()
    lo, hi = sorted((a, b))
    assert qm.strain_median(hi) <= qm.strain_median(lo)


def test_quality_model_validation():
    with pytest.raises(ValueError):
        QualityModel(base_stable_fraction=0.2, max_stable_fraction=0.1)
    with pytest.raises(ValueError):
        QualityModel(learning_rate=-1)


# adsorption --------------------------------------------------------------------------


def _charged(strain, quality=0.5):
    return _mof(1, strain).advance(MofStage.CellOptimized, 4.0).advance(MofStage.ChargesKnown, 5.0)


def test_zero_scale_capacity_is_the_location():
    qm = QualityModel(capacity_sigma=0.0)
    m = _charged(0.05)
    assert adsorption_outcome(m, qm, random.Random(0)) == qm.capacity_location(0.05, m.linker_quality)


def test_lower_strain_means_higher_capacity(rng):
    qm = QualityModel()
    low = statistics.fmean(adsorption_outcome(_charged(0.05), qm, rng) for _ in range(10_000))
    high = statistics.fmean(adsorption_outcome(_charged(0.24), qm, rng) for _ in range(10_000))
    assert low > high


def test_capacity_non_negative_and_needs_charges(rng):
    qm = QualityModel()
    assert all(adsorption_outcome(_charged(0.2), qm, rng) >= 0 for _ in range(1000))
    with pytest.raises(ValueError):
        adsorption_outcome(_mof(1, 0.1), qm, rng)


def test_charge_failure_rate(rng):
    model = MODELS[StageKind.EstimateAdsorption]
    failures = sum(not charges_outcome(model, rng) for _ in range(20_000))
    assert abs(failures / 20_000 - 0.02) < 0.004


# retraining --------------------------------------------------------------------------


@pytest.mark.parametrize("n, seconds", [(32, 30.0), (8192, 300.0)])
def test_retrain_duration_endpoints(n, seconds):
    assert retrain_duration(n) == pytest.approx(seconds)


def test_retrain_duration_midsize_matches_observed_mean():
    assert retrain_duration(2048) == pytest.approx(96.7, abs=0.05)
    assert abs(retrain_duration(2048) / 96.50 - 1) < 0.003


def test_retrain_update_contract():
    qm = QualityModel(learning_rate=1e-3)
    gen, seconds = retrain_update(GeneratorState(version=2, quality=0.1), 100, qm, now=50.0)
    assert gen.version == 3
    assert gen.quality == pytest.approx(0.1 + 0.9 * (1 - math.exp(-0.1)))
    assert gen.examples_seen == 100 and gen.last_retrain_at == 50.0
    assert seconds == retrain_duration(100)
    for n in (MIN_TRAINING_SET - 1, MAX_TRAINING_SET + 1):
        with pytest.raises(ValueError):
            retrain_update(GeneratorState(), n, qm)


@given(st.lists(st.integers(MIN_TRAINING_SET, MAX_TRAINING_SET), min_size=1, max_size=30),
       st.floats(0, 1e-2))
def test_retraining_never_lowers_quality(sizes, alpha):
    qm = QualityModel(learning_rate=alpha)
    gen = GeneratorState()
    for n in sizes:
        nxt, _ = retrain_update(gen, n, qm)
        assert gen.quality <= nxt.quality <= 1.0
        assert nxt.version == gen.version + 1
        gen = nxt


def test_repeated_retraining_converges_to_one():
    qm = QualityModel(learning_rate=1e-3)
    gen = GeneratorState()
    for _ in range(200):
        gen, _ = retrain_update(gen, 1000, qm)
    assert gen.quality == pytest.approx(1.0, abs=1e-9)


# training-set selection --------------------------------------------------------------


def _db(strains, capacities=()):
    db = CampaignDatabase()
    for i, s in enumerate(strains):
        db.record(_mof(i, s))
    for j, (s, c) in enumerate(capacities):
        db.record(_mof(10_000 + j, s, c))
    return db


def test_lowest_strain_half_before_switch():
    strains = [0.0024 * (i + 1) for i in range(100)]  # all below 0.25
    random.Random(0).shuffle(strains)
    db = _db(strains + [0.3, 0.4])
    chosen = select_training_set(db)
    assert not chosen.by_capacity
    assert chosen.size == 50
    picked = sorted(db.get(m).strain for m in chosen.mof_ids)
    assert picked == sorted(strains)[:50]
    assert set(chosen.linker_ids) == {l for m in chosen.mof_ids for l in db.linkers_of(m)}


def test_switches_to_capacity_after_64_adsorption_results():
    caps = [(0.1, float(c)) for c in range(64)]
    db = _db([0.01 * (i + 1) for i in range(20)], caps)
    chosen = select_training_set(db)
    assert chosen.by_capacity
    capacities = [db.get(m).capacity for m in chosen.mof_ids]
    assert capacities == sorted(capacities, reverse=True)
    assert min(capacities) >= 32.0  # top half of 0..63


def test_below_minimum_gives_empty_set():
    chosen = select_training_set(_db([0.01] * 10))
    assert not chosen and chosen.size == 0


def test_set_size_is_clamped_to_minimum():
    chosen = select_training_set(_db([0.005 * (i + 1) for i in range(40)]))
    assert chosen.size == MIN_TRAINING_SET


# pipeline chain -----------------------------------------------------------------------


def test_chain_survival_matches_remain_column():
    chain = simulate_chain(100_000, random.Random(2024))
    assert abs(chain.process_survival - 0.228) <= 0.01
    assert abs(chain.stability_survival - 0.086) <= 0.01
