import json
from dataclasses import replace

import pytest

from gsbuild.backends.client import BackendError, InProcessBackend
from gsbuild.manifest import dumps_manifest, load_manifest
from gsbuild.metrics import cer
from gsbuild.refine import (Backends, CheckpointError, RefineOptions, RunDir, filter_by_cer, relabel, run,
                            split_pseudo_set)
from gsbuild.textnorm import get_profile
from gsbuild.toy import hidden_cer, synthetic_pool
from fixtures import segments_manifest, sim_backends

ID = get_profile("id")


@pytest.fixture(scope="module")
def pool_and_truth():
    return synthetic_pool(n_channels=6, videos_per_channel=1, segments_per_video=15, seed=2)


def opts(**kw) -> RefineOptions:
    base = dict(n=3, tau=0.10, noise_config={"dropout": 0.1}, seed=2, parallelism=2, backoff_s=0.0)
    base.update(kw)
    return RefineOptions(**base)


# ---------------------------------------------------------------------- splits

def test_single_split_is_the_pool(pool_and_truth):
    pool, _ = pool_and_truth
    (only,) = split_pseudo_set(pool, 1)
    assert only.segments == pool.segments


def test_equal_channels_pair_up():
    rows = [(f"c{i}", f"c{i}-v", 0.0, 10.0, "A") for i in range(6)]
    parts = split_pseudo_set(segments_manifest(rows), 3, seed=1)
    assert [len(p.split_assignment) for p in parts] == [2, 2, 2]


def test_random_splits_are_balanced_and_channel_atomic(pool_and_truth):
    pool, _ = synthetic_pool(n_channels=24, videos_per_channel=2, segments_per_video=10, seed=5)
    parts = split_pseudo_set(pool, 3, seed=5)
    hours = [sum(s.duration_s for s in p.segments.values()) for p in parts]
    mean = sum(hours) / 3
    assert max(hours) - min(hours) <= 0.2 * mean
    channel_sets = [set(p.split_assignment) for p in parts]
    assert sum(len(c) for c in channel_sets) == len(set().union(*channel_sets)) == 24


def test_too_few_channels():
    with pytest.raises(ValueError):
        split_pseudo_set(segments_manifest([("c", "c-v", 0, 3, "A")]), 2)


# ------------------------------------------------------------------------ gate

def gate_fixture():
    # labels and teacher outputs with CER 0, 0.05 and 0.2 against the label
    labels = {"a": "ABCDEFGHIJKLMNOPQRST", "b": "ABCDEFGHIJKLMNOPQRST", "c": "ABCDEFGHIJ"}
    teacher = {"a": "ABCDEFGHIJKLMNOPQRST", "b": "ABCDEFGHIJKLMNOPQRSX", "c": "ABCDEFGHXY"}
    rows = [("ch", "ch-v", float(i * 5), float(i * 5 + 3), labels[k]) for i, k in enumerate("abc")]
    m = segments_manifest(rows)
    ids = sorted(m.segments)
    return m, {ids[i]: teacher[k] for i, k in enumerate("abc")}, ids


def test_filter_by_cer_keeps_original_labels():
    m, teacher, ids = gate_fixture()
    assert [cer(m.segments[i].text, teacher[i]) for i in ids] == [0.0, 0.05, 0.2]
    kept, parked = filter_by_cer(m, teacher, 0.10)
    assert sorted(kept.segments) == ids[:2] and parked == []
    assert kept.segments[ids[1]].text == m.segments[ids[1]].text
    assert kept.segments[ids[1]].cer_vs_prev == pytest.approx(0.05)
    assert len(filter_by_cer(m, teacher, 0.0)[0].segments) == 1
    assert len(filter_by_cer(m, teacher, float("inf"))[0].segments) == 3


def test_missing_teacher_output_parks():
    m, teacher, ids = gate_fixture()
    del teacher[ids[0]]
    kept, parked = filter_by_cer(m, teacher, 1.0)
    assert parked == [ids[0]] and ids[0] not in kept.segments


def test_relabel_takes_teacher_text():
    m, teacher, ids = gate_fixture()
    out, _ = relabel(m, teacher, 0.10, iteration=2)
    assert out.segments[ids[1]].text == teacher[ids[1]]
    assert out.segments[ids[1]].raw_text == m.segments[ids[1]].raw_text
    assert out.segments[ids[1]].source == "teacher:2"
    same = {k: s.text for k, s in m.segments.items()}
    a, _ = relabel(m, same, 0.1, 2)
    b, _ = filter_by_cer(m, same, 0.1)
    assert {k: replace(s, source="x") for k, s in a.segments.items()} == \
           {k: replace(s, source="x") for k, s in b.segments.items()}
    exact, _ = relabel(m, teacher, 0.0, 2)
    assert all(s.text == m.segments[k].text for k, s in exact.segments.items())


# ------------------------------------------------------------------------ loop

def test_options_validation():
    with pytest.raises(ValueError):
        opts(capacities=["L", "M", "M", "M"])
    with pytest.raises(ValueError):
        opts(capacities=["M", "M"])
    with pytest.raises(ValueError):
        opts(noise_config=None)
    assert opts(capacities=["S", "M", "M", "XL"]).capacity_schedule()[-1] == "XL"


def test_n_equals_one_is_a_single_filter_pass(tmp_path, pool_and_truth):
    pool, truth = pool_and_truth
    be = sim_backends(truth, seed=2)
    state = run(pool, opts(n=1), be, tmp_path, ID)
    assert state.done and len(state.history) == 2
    assert all(s.source == "whisper" for s in state.refined.segments.values())
    rd = RunDir(tmp_path)
    outputs = {json.loads(l)["id"]: json.loads(l)["text"]
               for l in rd.teacher_cache(1, 1).read_text(encoding="utf-8").splitlines()}
    expected, _ = filter_by_cer(load_manifest(rd.split(1)), outputs, 0.10)
    assert dumps_manifest(state.refined) == dumps_manifest(expected)


def test_gate_soundness_coverage_and_provenance(tmp_path, pool_and_truth):
    pool, truth = pool_and_truth
    state = run(pool, opts(capacities=["S", "M", "M", "L"]), sim_backends(truth, seed=2), tmp_path, ID)
    rd = RunDir(tmp_path)
    for i in (1, 2, 3):
        r = load_manifest(rd.refined(i))
        gate = json.loads(rd.gate(i).read_text(encoding="utf-8"))
        assert gate["summary"]["splits"] == ([1] if i == 1 else list(range(1, i + 1)))
        for seg in r.segments.values():
            assert seg.cer_vs_prev is not None and seg.cer_vs_prev <= 0.10
            assert seg.source == ("whisper" if i == 1 else f"teacher:{i}")
    caps = [h["student"].split("-")[1] for h in state.history]
    assert caps == ["S", "M", "M", "L"]


def test_refinement_lowers_hidden_cer(tmp_path, pool_and_truth):
    pool, truth = pool_and_truth
    run(pool, opts(), sim_backends(truth, seed=2), tmp_path, ID)
    rd = RunDir(tmp_path)
    cers = [hidden_cer(load_manifest(rd.refined(i)), truth) for i in (1, 2, 3)]
    assert cers[0] >= cers[1] >= cers[2] and cers[2] < cers[0]


def test_trainer_failure_leaves_checkpoint_untouched(tmp_path, pool_and_truth):
    pool, truth = pool_and_truth
    good = sim_backends(truth, seed=2)
    run(pool, opts(), good, tmp_path, ID, stop_after=1)
    before = (tmp_path / "state.json").read_bytes()

    def broken(req):
        raise RuntimeError("node lost")

    with pytest.raises(BackendError):
        run(pool, opts(), Backends(good.transcriber, InProcessBackend("trainer", broken)), tmp_path, ID)
    assert (tmp_path / "state.json").read_bytes() == before
    final = run(pool, opts(), good, tmp_path, ID)
    assert final.done


def test_resume_equals_uninterrupted(tmp_path, pool_and_truth):
    pool, truth = pool_and_truth
    run(pool, opts(), sim_backends(truth, seed=2), tmp_path / "a", ID)
    part = run(pool, opts(), sim_backends(truth, seed=2), tmp_path / "b", ID, stop_after=2)
    assert not part.done and part.iteration == 3
    run(pool, opts(), sim_backends(truth, seed=2), tmp_path / "b", ID)
    assert (tmp_path / "a" / "R_final.jsonl").read_bytes() == (tmp_path / "b" / "R_final.jsonl").read_bytes()


def test_corrupt_checkpoints_are_typed(tmp_path, pool_and_truth):
    pool, truth = pool_and_truth
    be = sim_backends(truth, seed=2)
    run(pool, opts(), be, tmp_path, ID, stop_after=1)
    r1 = RunDir(tmp_path).refined(1)
    r1.write_text(r1.read_text(encoding="utf-8") + "\n", encoding="utf-8")
    with pytest.raises(CheckpointError, match="changed"):
        run(pool, opts(), be, tmp_path, ID)
    (tmp_path / "state.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(CheckpointError):
        run(pool, opts(), be, tmp_path, ID)


def test_resume_rejects_other_options_or_pool(tmp_path, pool_and_truth):
    pool, truth = pool_and_truth
    be = sim_backends(truth, seed=2)
    run(pool, opts(), be, tmp_path, ID, stop_after=1)
    with pytest.raises(CheckpointError, match="different options"):
        run(pool, opts(tau=0.2), be, tmp_path, ID)
    smaller = pool.with_segments(list(pool.segments.values())[:-1])
    with pytest.raises(CheckpointError, match="different pseudo-labelled pool"):
        run(smaller, opts(), be, tmp_path, ID)
    with pytest.raises(CheckpointError):
        run(pool, opts(), be, tmp_path, ID, resume=False)
