import random

import pytest

from kingsguard.binprep import prep
from kingsguard.dift import Format, propagate
from kingsguard.errors import AdpMatchedDuringRun, ScenarioAssertionError, UnknownScenario
from kingsguard.harness import scenarios
from kingsguard.harness.differential import differential_check, pack_words
from kingsguard.harness.fuzz import ProgramGenerator, and_propagate, fuzz_noninterference


def _secrets(secret):
    return pack_words([secret, scenarios.PAD])


@pytest.mark.parametrize("name", scenarios.AV_NAMES)
def test_attack_indistinguishable_with_protections(name):
    src = scenarios.av_source(name, attack=True)
    verdict = differential_check(src, _secrets(0x11), _secrets(0x22))
    assert not verdict.distinguishable, verdict.witness


@pytest.mark.parametrize("name", scenarios.AV_NAMES)
def test_attack_distinguishable_without_protections(name):
    src = scenarios.av_source(name, attack=True)
    verdict = differential_check(src, _secrets(0x11), _secrets(0x22), protections=False)
    assert verdict.distinguishable and verdict.witness


def test_legit_release_is_outside_the_oracle():
    src = scenarios.av_source("av1", attack=False)
    with pytest.raises(AdpMatchedDuringRun):
        differential_check(src, _secrets(0x11), _secrets(0x22))


def test_and_mutation_differs_only_on_reg_reg():
    for a in (0, 1):
        for b in (0, 1):
            assert and_propagate(Format.REG_REG, a, b) == (a & b)
            for fmt in (Format.REG_IMM, Format.LOAD, Format.STORE):
                assert and_propagate(fmt, a, b, a) == propagate(fmt, a, b, a)


def test_generated_programs_assemble():
    gen = ProgramGenerator(random.Random(5))
    for _ in range(5):
        built = prep(gen.program(), b"k")
        assert built.digests  # the decoy path keeps H* non-empty
        assert len(gen.secrets()) == len(built.program.sensitive)


def test_fuzz_argument_checks():
    with pytest.raises(ValueError):
        fuzz_noninterference(1, 0, 3)
    with pytest.raises(ValueError):
        fuzz_noninterference(1, 3, 0)


def test_fuzz_small_campaign_clean():
    summary = fuzz_noninterference(1, 10, 3)
    assert summary.trials == 30 and summary.indistinguishable == 30
    assert "distinguishable=0" in summary.text()


def test_fuzz_finds_planted_bug():
    summary = fuzz_noninterference(1, 40, 3, and_propagate, stop_at_first=True)
    assert summary.distinguishable == 1
    assert "counterexample" in summary.text()


def test_fuzz_is_reproducible():
    a = fuzz_noninterference(9, 4, 2, and_propagate)
    b = fuzz_noninterference(9, 4, 2, and_propagate)
    assert [c.witness for c in a.counterexamples] == [c.witness for c in b.counterexamples]


def test_walsh_hadamard_oracle():
    # hand-checked: a constant input concentrates in bin 0
    assert scenarios.walsh_hadamard([1] * 8) == [8, 0, 0, 0, 0, 0, 0, 0]
    assert scenarios.walsh_hadamard([1, 0, 0, 0, 0, 0, 0, 0]) == [1] * 8
    x = [3, 1, 4, 1, 5, 9, 2, 6]
    assert scenarios.walsh_hadamard(scenarios.walsh_hadamard(x)) == [8 * v for v in x]


@pytest.mark.parametrize("variant", scenarios.SCADA_VARIANTS)
@pytest.mark.parametrize("protections", [True, False])
def test_scada_variants(variant, protections):
    rep = scenarios.run_scada(protections, variant)
    assert rep.passed, rep.summary()


def test_unknown_scenario_and_failed_report():
    with pytest.raises(UnknownScenario):
        scenarios.run_scenario("av9")
    rep = scenarios.run_scenario("av1")
    rep.expect("forced failure", False)
    with pytest.raises(ScenarioAssertionError):
        rep.assert_passed()
