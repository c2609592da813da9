"""Exit criteria for the package, one test per criterion.

Each test prints a PASS/FAIL line; the lines are repeated in the pytest
terminal summary under "acceptance criteria".
"""
import json
import math
import random
import shutil
import sys

import numpy as np
import pytest

from acceptance_report import criterion
from fixtures import channel_corpus, feasible_pair_exists, random_channel_hours, segments_manifest, sim_backends
from oracles import best_ctc_score, edit_distance_oracle, is_pure
from gsbuild import pipeline
from gsbuild.align import EmissionMatrix, InfeasibleAlignmentError, token_spans, viterbi_align
from gsbuild.backends.client import InProcessBackend
from gsbuild.backends.mock import MockLid
from gsbuild.cli import EXIT_OK, main
from gsbuild.filters import BALANCE, CHARSET, DURATION, LID, FilterConfig, apply_all, balance_violations, recheck
from gsbuild.manifest import DEV, TEST, TRAIN, UNASSIGNED, assign_splits, compute_stats, load_manifest
from gsbuild.metrics import CHAR, cer, edit_distance, tokenize, wer
from gsbuild.refine import RefineOptions, RunDir, run
from gsbuild.textnorm import SHIPPED_LANGUAGES, expand_numerals, get_profile, normalize
from gsbuild.toy import hidden_cer, make_toy_corpus, synthetic_pool, toy_config

pytestmark = pytest.mark.acceptance


def _oracle_rate(ref_tokens, hyp_tokens):
    if not ref_tokens:
        return 0.0 if not hyp_tokens else math.inf
    return edit_distance_oracle(ref_tokens, hyp_tokens) / len(ref_tokens)


def test_1_metrics_match_oracle():
    rng = random.Random(1)
    with criterion(1, "edit distance, CER and WER equal the recursion oracle on 1000 pairs", 10) as c:
        corpus = []
        for _ in range(1000):
            alpha = "abcde"[: rng.randint(1, 5)]
            a = "".join(rng.choice(alpha) for _ in range(rng.randint(0, 12)))
            b = "".join(rng.choice(alpha) for _ in range(rng.randint(0, 12)))
            corpus.append((a, b))
        mismatches = 0
        for a, b in corpus:
            d = edit_distance(tokenize(a, CHAR), tokenize(b, CHAR))
            mismatches += d != edit_distance_oracle(a, b)
            mismatches += cer(a, b) != _oracle_rate(list(a), list(b))
            # spaced copies exercise the word tokenizer with the same symbols
            wa, wb = " ".join(a), " ".join(b)
            mismatches += wer(wa, wb) != _oracle_rate(wa.split(), wb.split())
        c.check(mismatches == 0, f"{mismatches} values differ from the oracle")

        def dist(x, y):
            return edit_distance(tokenize(x, CHAR), tokenize(y, CHAR))

        axioms = 0
        for i, (a, b) in enumerate(corpus):
            z = corpus[(i * 7 + 3) % len(corpus)][0]
            axioms += dist(a, a) != 0
            axioms += (dist(a, b) == 0) != (a == b)
            axioms += dist(a, b) != dist(b, a)
            axioms += dist(a, z) > dist(a, b) + dist(b, z)
        c.check(axioms == 0, f"{axioms} axiom violations")
        c.note("1000 pairs, identity, symmetry and triangle checked")


def _log_softmax(rng, T, V):
    x = rng.normal(size=(T, V)) * 2
    x -= np.log(np.exp(x).sum(axis=1, keepdims=True))
    return x.astype(np.float32)


def test_2_alignment_matches_enumeration():
    with criterion(2, "Viterbi score equals exhaustive CTC enumeration on 500 instances", 30) as c:
        bad, infeasible = [], 0
        for seed in range(500):
            rng = np.random.default_rng(seed)
            r = random.Random(seed)
            T, V = r.randint(1, 8), r.randint(2, 4)
            tokens = [r.randint(1, V - 1) for _ in range(r.randint(1, 3))]
            lp = _log_softmax(rng, T, V)
            e = EmissionMatrix(lp, 0.02, tuple(f"s{i}" for i in range(V)), 0, None)
            best = best_ctc_score(lp.astype(np.float64).tolist(), tokens)
            if best == -math.inf:
                infeasible += 1
                try:
                    viterbi_align(e, tokens)
                    bad.append(f"seed {seed}: infeasible instance aligned")
                except InfeasibleAlignmentError:
                    pass
                continue
            p = viterbi_align(e, tokens)
            if p.total_log_score != best:
                bad.append(f"seed {seed}: {p.total_log_score} != {best}")
            spans = token_spans(p, e)
            ordered = [s.token for s in spans] == list(range(len(tokens)))
            disjoint = all(x.end_frame < y.start_frame for x, y in zip(spans, spans[1:]))
            if not (ordered and disjoint):
                bad.append(f"seed {seed}: spans {[(s.start_frame, s.end_frame) for s in spans]}")
        c.check(not bad, "; ".join(bad[:3]))
        c.note(f"{500 - infeasible} feasible, {infeasible} infeasible correctly refused")


FUZZ_POOLS = {
    "ascii": "abcxyzABCXYZ",
    "digits": "0123456789",
    "other_digits": "๐๑๒๓๔๕๖๗๘๙０１２３٣",
    "punct": ".,!?;:'\"()[]-–—…«»、。“”‘’",
    "space": " \t\n  　",
    "compat": "ﬁﬀ①²½ｶﾞＡｚ",
    "th": "กขคงจฉชซญดตถทนบปผพฟภมยรลวศษสหอฮะัาำิีึืุูเแโใไ่้๊๋็์",
    "vi": "ăâđêôơưáàảãạắằẳẵặấầẩẫậéèẻẽẹếềểễệíìỉĩịóòỏõọốồổỗộớờởỡợúùủũụứừửữựýỳỷỹỵ",
    "combining": "̣̀́̃̉",
}


def fuzz_string(rng: random.Random) -> str:
    out = []
    for _ in range(rng.randint(0, 30)):
        pool = rng.choice(list(FUZZ_POOLS.values()) + ["*"])
        if pool == "*":
            cp = rng.randint(0x20, 0x2FFFF)
            if 0xD800 <= cp <= 0xDFFF:
                continue
            out.append(chr(cp))
        else:
            out.append(rng.choice(pool))
    return "".join(out)


def test_3_normalization_invariants():
    with criterion(3, "normalization idempotent and pure on 10000 fuzzed strings per profile") as c:
        for code in SHIPPED_LANGUAGES:
            p = get_profile(code)
            rng = random.Random(f"fuzz-{code}")
            failures = 0
            for _ in range(10_000):
                once = normalize(fuzz_string(rng), p)
                failures += normalize(once, p) != once or not is_pure(once, p.script_has_case)
            c.check(failures == 0, f"{code}: {failures} strings not idempotent or not pure")
        # the worked examples, resolved against the shipped tables
        c.check(normalize("Hello, world! 2", get_profile("id")) == "HELLO WORLD DUA", "id 'Hello, world! 2'")
        c.check(expand_numerals("0", get_profile("th")) == "ศูนย์", "th '0'")
        c.check(expand_numerals("10", get_profile("id")).strip() == "sepuluh", "id '10'")
        c.note("3 profiles x 10000 strings, worked numeral examples resolved")


FILTER_FIXTURE = [
    ("a", "a-v1", 0.0, 3.0, "SATU DUA TIGA"),
    ("a", "a-v1", 4.0, 7.0, "INTRO KAMI"),
    ("a", "a-v1", 8.0, 11.0, "INTRO KAMI"),
    ("a", "a-v2", 0.0, 3.0, "INTRO KAMI"),
    ("a", "a-v2", 4.0, 9.0, "HALO ทดสอบ"),
    ("b", "b-v1", 0.0, 1.5, "PENDEK SEKALI"),
    ("b", "b-v1", 2.0, 6.0, "HA HA HA HA HA HA"),
    ("b", "b-v1", 7.0, 10.0, "INTRO KAMI"),
    ("b", "b-v2", 0.0, 4.0, "EMPAT LIMA ENAM"),
    ("b", "b-v2", 5.0, 9.0, "TUJUH DELAPAN"),
]


def test_4_filter_contract():
    with criterion(4, "filter fixture: one rejection per rule, clean recheck, idempotent") as c:
        cfg = FilterConfig.for_profile(get_profile("id"), max_dup_per_channel=2)
        out, report = apply_all(segments_manifest(FILTER_FIXTURE), cfg, InProcessBackend("lid", MockLid()))
        c.check(report.rejected == {CHARSET: 1, DURATION: 1, LID: 1, BALANCE: 1},
                f"rejections {report.rejected}")
        c.check(len(out.segments) == 6 and report.reconciles(), "retained count does not reconcile")
        violations = [(s.id, r) for s in out.segments.values() for r in recheck(s, cfg)]
        violations += balance_violations(out.segments.values(), cfg.max_dup_per_channel)
        c.check(not violations, f"retained segments violate rules: {violations}")
        lid = InProcessBackend("lid", MockLid())
        again, report2 = apply_all(out, cfg, lid)
        c.check(again == out, "second pass changed the manifest")
        c.check(lid.requests_sent == 0, "cached LID scores were not reused")
        c.check(sum(report2.rejected.values()) == 0, "second pass rejected segments")


def test_5_partition_targets():
    with criterion(5, "20-channel partition hits 10 h DEV/TEST within 10%, atomic and disjoint") as c:
        landed = []
        for seed in range(5):
            hours = random_channel_hours(20, seed)
            c.check(feasible_pair_exists(hours, 10, 10), f"seed {seed}: fixture has no feasible split")
            base = channel_corpus(hours)
            # three segments per channel, together as long as the channel, so that
            # atomicity is observable at segment level
            rows = []
            for ch, h in hours.items():
                third = h * 3600.0 / 3
                rows += [(ch, f"{ch}-v0", k * third, (k + 1) * third, "X") for k in range(3)]
            base.segments.update(segments_manifest(rows).segments)
            m = assign_splits(base, 10, 10, seed=seed)
            got = {DEV: 0.0, TEST: 0.0, TRAIN: 0.0}
            for ch, split in m.split_assignment.items():
                got[split] += hours[ch]
            for split in (DEV, TEST):
                c.check(9.0 <= got[split] <= 11.0, f"seed {seed}: {split} has {got[split]:.2f} h")
            c.check(set(m.split_assignment) == set(hours), f"seed {seed}: channel set changed")
            c.check(UNASSIGNED not in m.split_assignment.values(), f"seed {seed}: channel left unassigned")
            per_split = {}
            for s in m.segments.values():
                per_split.setdefault(s.channel, set()).add(m.split_assignment[s.channel])
            c.check(all(len(v) == 1 for v in per_split.values()), f"seed {seed}: channel spans splits")
            stats = compute_stats(m)
            c.check(abs(stats.splits[DEV].hours - got[DEV]) <= 1e-6 * got[DEV],
                    f"seed {seed}: stats disagree with assignment")
            landed.append(f"{got[DEV]:.2f}/{got[TEST]:.2f}")
        c.note("DEV/TEST hours over 5 seeds: " + ", ".join(landed))


def _simulate(tmp, pool, truth, relabel):
    opts = RefineOptions(n=3, tau=0.10, noise_config={"specaugment": True}, relabel_enabled=relabel, seed=0)
    state = run(pool, opts, sim_backends(truth, noise=0.20, seed=0, alpha=0.7), tmp, profile=get_profile("id"))
    rd = RunDir(tmp)
    return state, rd, [hidden_cer(load_manifest(rd.refined(i)), truth) for i in (1, 2, 3)]


def test_6_refinement_simulation(tmp_path):
    with criterion(6, "refinement simulation lowers hidden CER, gate holds, relabeling helps", 120) as c:
        pool, truth = synthetic_pool(seed=0)
        state, rd, cers = _simulate(tmp_path / "relabel", pool, truth, True)
        c.check(cers[0] >= cers[1] >= cers[2], f"hidden CER not non-increasing: {cers}")
        c.check(cers[2] < cers[0], f"iteration 3 not below iteration 1: {cers}")
        for i in (1, 2, 3):
            r = load_manifest(rd.refined(i))
            c.check(len(r.segments) > 0, f"iteration {i} retained nothing")
            bad = [s.id for s in r.segments.values() if s.cer_vs_prev is None or s.cer_vs_prev > 0.10]
            c.check(not bad, f"iteration {i}: {len(bad)} segments above the gate")
        _, _, plain = _simulate(tmp_path / "plain", pool, truth, False)
        c.check(plain[2] >= cers[2], f"no-relabel final {plain[2]:.4f} below relabel final {cers[2]:.4f}")
        c.note("hidden CER " + " -> ".join(f"{x:.4f}" for x in cers) + f"; without relabeling {plain[2]:.4f}")


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    runs = []
    for name in ("first", "second"):
        root = tmp_path_factory.mktemp(name)
        truth = make_toy_corpus(root, seed=0)
        cfg = toy_config(root, truth, python=sys.executable)
        runs.append((root, cfg))
    return runs


def _tree(root):
    skip = {"timings.jsonl"}
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def test_7_toy_pipeline(toy_runs, capsys):
    with criterion(7, "toy pipeline completes twice with byte-identical outputs and an RTF table") as c:
        outputs = []
        for root, cfg in toy_runs:
            code = main(["run-all", "-c", str(cfg)])
            c.check(code == EXIT_OK, f"run-all in {root.name} exited {code}")
            outputs.append(capsys.readouterr().out)
        a, b = (_tree(root / "work") for root, _ in toy_runs)
        diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
        c.check(not diff, f"differing artifacts: {diff[:5]}")
        for stage in pipeline.STAGES:
            c.check(pipeline.ARTIFACTS[stage] in a, f"{stage} artifact missing")
        table = outputs[0][outputs[0].index("stage"):].splitlines()
        c.check(table[0].split() == ["stage", "wall", "audio", "h", "RTF"], "RTF table header missing")
        c.check([row.split()[0] for row in table[1:len(pipeline.STAGES) + 1]] == list(pipeline.STAGES),
                "RTF table does not list every stage")
        refined = load_manifest(toy_runs[0][0] / "work" / pipeline.ARTIFACTS["refine"])
        c.note(f"{len(a)} artifacts identical, {len(refined.segments)} refined segments")


def test_8_resume_equivalence(tmp_path, toy_runs):
    with criterion(8, "refine stopped after iteration 2 and resumed equals an uninterrupted run") as c:
        pool, truth = synthetic_pool(seed=0)
        opts = RefineOptions(n=3, tau=0.10, noise_config={"specaugment": True}, seed=0)
        run(pool, opts, sim_backends(truth, seed=0), tmp_path / "whole", get_profile("id"))
        part = run(pool, opts, sim_backends(truth, seed=0), tmp_path / "split", get_profile("id"), stop_after=2)
        c.check(not part.done, "run did not stop after iteration 2")
        run(pool, opts, sim_backends(truth, seed=0), tmp_path / "split", get_profile("id"))
        whole = (tmp_path / "whole" / "R_final.jsonl").read_bytes()
        c.check(whole == (tmp_path / "split" / "R_final.jsonl").read_bytes(), "library resume differs")

        # the same through the command line, on two copies of the finished toy run
        finals = []
        for name, interrupt in (("cli-whole", False), ("cli-split", True)):
            root = tmp_path / name
            shutil.copytree(toy_runs[0][0], root)
            shutil.rmtree(root / "work" / "refine")
            cfg = toy_config(root, root / "truth.json", python=sys.executable)
            base = ["refine", "-c", str(cfg), "--iterations", "3"]
            if interrupt:
                c.check(main(base + ["--stop-after", "2"]) == EXIT_OK, "refine --stop-after 2 failed")
                state = json.loads((root / "work" / "refine" / "state.json").read_text(encoding="utf-8"))
                c.check(state["iteration"] == 3, f"checkpoint at iteration {state['iteration']}, expected 3")
            c.check(main(base) == EXIT_OK, f"{name}: refine failed")
            finals.append((root / "work" / pipeline.ARTIFACTS["refine"]).read_bytes())
        c.check(finals[0] == finals[1], "CLI resume differs from the uninterrupted run")
