"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line and the suite summary repeats them."""

import json
import time

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from crossdecode import losses as L
from crossdecode.adapters import default_plan, inject_adapters
from crossdecode.alignment import closed_form_ridge, init_new_subject_head, init_ridge_head
from crossdecode.cli import main
from crossdecode.cohort import generate_cohort
from crossdecode.config import FingerprintConfig, preset
from crossdecode.evaluation import Decoders, evaluate
from crossdecode.fingerprint import run_fingerprint_experiment
from crossdecode.model import AdaptedModel, build_shared_model, forward
from crossdecode.numerics import Tensor, grad_check, make_rng
from crossdecode.numerics import tape as T
from crossdecode.training import Targets, batch_losses, finetune, init_adapted, pretrain, variant_config

from .conftest import TINY, tiny_config
from .oracles import gradient_ridge, infonce

ACCEPT = preset("acceptance")
SEEDS = range(5)
VERDICTS = []


def verdict(n, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {name}: {detail}"
    VERDICTS.append(line)
    print("\n" + line)
    assert ok, line


class Runs:
    """Lazily trained models on the default cohort, shared between criteria; wall time is tracked per step."""

    def __init__(self):
        self.cohorts, self.shared, self.decoders, self.metrics, self.seconds = {}, {}, {}, {}, {}

    def cfg(self, seed):
        return ACCEPT.replace(seed=seed)

    def base(self, seed):
        if seed not in self.shared:
            t = time.perf_counter()
            cfg = self.cfg(seed)
            self.cohorts[seed] = generate_cohort(cfg.cohort, seed)
            self.shared[seed] = pretrain(self.cohorts[seed], cfg)[0]
            self.decoders[seed] = Decoders.fit(self.cohorts[seed], self.cohorts[seed].train_ids, cfg.eval.decoder_l2)
            self.seconds[seed, "pretrain"] = time.perf_counter() - t
        return self.cohorts[seed], self.shared[seed], self.decoders[seed]

    def __call__(self, seed, variant):
        cfg = variant_config(self.cfg(seed), variant)
        # cells with identical configs (rank8 and full) share one run
        key = seed, cfg.hash()
        if key not in self.metrics:
            cohort, shared, dec = self.base(seed)
            t = time.perf_counter()
            model, _ = finetune(shared, cohort, cfg)
            self.metrics[key] = evaluate(model, cohort, cfg, dec).metrics
            self.seconds[key] = time.perf_counter() - t
        return self.metrics[key]

    def mean(self, variant, key, seeds=SEEDS):
        return float(np.mean([self(s, variant)[key] for s in seeds]))

    def cost(self, variants, seeds=SEEDS):
        return sum(self.seconds[s, "pretrain"] + sum(self.seconds[s, variant_config(self.cfg(s), v).hash()]
                                                     for v in variants) for s in seeds)


@pytest.fixture(scope="module")
def runs():
    return Runs()


# ---------------------------------------------------------------------------
# exact properties
# ---------------------------------------------------------------------------


def float64_setup(seed=0, batch=4):
    cfg = tiny_config(train={"dtype": "float64"})
    c = cfg.cohort
    rng = np.random.default_rng(seed)
    shared = build_shared_model(cfg, {2: 30, 3: 30}, seed=seed, dtype=np.float64)
    head = init_new_subject_head(1, 30, shared.backbone.d0, dtype=np.float64)
    plan = default_plan(shared, cfg.adapters.lora_min_width)
    plan.lora_sites.insert(0, "ridge")
    ad = inject_adapters(shared, plan, cfg.adapters.rank, make_rng(seed, "a"), 30, 1, dtype=np.float64)
    # move off the zero initialisation so every path carries gradient
    for p in [head.weight, *(b.A for b in ad.lora.values()), *(b.lora.A for b in ad.skip.values())]:
        p.data[...] = rng.normal(0, 0.1, size=p.shape)
    unit = lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True)
    tgt = Targets(rng.normal(size=(batch, c.n_tokens, c.token_dim)), unit(rng.normal(size=(batch, c.token_dim))),
                  rng.normal(size=(batch, c.lowlevel_dim)), unit(rng.normal(size=(batch, c.text_dim))))
    V = rng.normal(size=(batch, 30))
    return cfg, shared, head, ad, tgt, V


def test_c01_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    y = rng.normal(size=(4, 6))
    y_unit = y / np.linalg.norm(y, axis=1, keepdims=True)
    mix = L.mixco_mix(rng.normal(size=(4, 3)), rng=rng)
    worst = {
        "bimixco": grad_check(lambda: L.bimixco_loss(T.l2_normalize(x), y_unit, mix, 0.1), [x]).worst,
        "softclip": grad_check(lambda: L.softclip_loss(T.l2_normalize(x), y_unit, 0.1), [x]).worst,
        "lowlevel": grad_check(lambda: L.lowlevel_loss(x, y), [x]).worst,
        "prior": grad_check(lambda: L.prior_loss(x, y), [x]).worst,
        "skip": grad_check(lambda: L.skip_loss([x], [T.tanh(x * 0.5) + Tensor(y)]), [x]).worst,
        "pivot": grad_check(lambda: L.pivot_loss(T.l2_normalize(x), y_unit, 0.1), [x]).worst,
    }
    cfg, shared, head, ad, tgt, V = float64_setup()
    idx = np.arange(4)
    params = list(shared.parameters().values())
    trainable = list(head.parameters("ridge").values()) + list(ad.parameters().values()) \
        + list(shared.projector.parameters().values())
    for kind in ("bimixco", "softclip"):
        pre = lambda: batch_losses(shared, shared.ridge[2], V, tgt, idx, kind, cfg, make_rng(1, "gc"))["total"]
        new = lambda: batch_losses(shared, head, V, tgt, idx, kind, cfg, make_rng(1, "gc"), ad, shared.projector,
                                   new_subject=True)["total"]
        worst[f"total_pretrain[{kind}]"] = grad_check(pre, params, max_entries=4).worst
        worst[f"total_finetune[{kind}]"] = grad_check(new, trainable, max_entries=4).worst
    elapsed = time.perf_counter() - t0
    bad = max(worst, key=worst.get)
    verdict(1, "gradient fidelity", worst[bad] < 1e-4 and elapsed < 60,
            f"worst rel err {worst[bad]:.2e} ({bad}) over {len(worst)} losses, {elapsed:.1f}s")


def test_c02_ridge_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 30))
    Y = X @ rng.normal(size=(30, 10)) + 0.1 * rng.normal(size=(200, 10))
    lam = 1.0
    rmse = float(np.sqrt(np.mean((gradient_ridge(X, Y, lam) - closed_form_ridge(X, Y, lam)) ** 2)))
    elapsed = time.perf_counter() - t0
    verdict(2, "ridge oracle", rmse < 1e-3 and elapsed < 60, f"parameter RMSE {rmse:.2e}, {elapsed:.1f}s")


@pytest.mark.slow
def test_c03_zero_init_equivalence(runs):
    cohort, shared, _ = runs.base(0)
    cfg = runs.cfg(0)
    bare = init_adapted(shared, cohort, variant_config(cfg, "ridge-only"))
    adapted = init_adapted(shared, cohort, cfg)
    # same random head for both, so the outputs are not trivially constant
    head = init_ridge_head(1, bare.head.n_voxels, shared.backbone.d0, make_rng(0, "c3"))
    V = bare.scaler(cohort.subjects[1].test_voxels[:32], np.float32)
    a = forward(shared, head, V, None, bare.projector)
    b = forward(shared, head, V, adapted.adapters, adapted.projector)
    same = all(np.array_equal(getattr(a, k).data, getattr(b, k).data) for k in ("e", "z", "g", "p"))
    same &= all(np.array_equal(x.data, y.data) for x, y in zip(a.bb.linear, b.bb.linear))
    tgt = Targets.of(cohort, cohort.subjects[1].test_stimuli[:32])
    idx = np.arange(32)
    diffs = []
    for kind in ("bimixco", "softclip"):
        la = batch_losses(shared, head, V, tgt, idx, kind, cfg, make_rng(0, "c3", kind), None, bare.projector, True)
        lb = batch_losses(shared, head, V, tgt, idx, kind, cfg, make_rng(0, "c3", kind), adapted.adapters,
                          adapted.projector, True)
        diffs += [f"{kind}:{k}" for k in la if not np.array_equal(la[k].data, lb[k].data)]
    verdict(3, "zero-init equivalence", same and not diffs,
            "forward outputs and loss values identical" if same and not diffs else f"differ: {diffs or 'outputs'}")


def test_c04_mixco_boundary():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(5):
        a = rng.normal(size=(8, 5))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b = rng.normal(size=(8, 5))
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        mix = L.mixco_mix(rng.normal(size=(8, 3)), lam=np.ones(8), rng=rng)
        got = float(L.bimixco_loss(Tensor(a), b, mix, 0.1).data)
        worst = max(worst, abs(got - infonce(a, b, 0.1)))
    verdict(4, "MixCo boundary", worst < 1e-10, f"max |bimixco(lambda=1) - InfoNCE| = {worst:.1e}")


@pytest.mark.slow
def test_c05_chance_levels(runs):
    ret, two = [], []
    for seed in SEEDS:
        cfg = runs.cfg(seed)
        cohort = generate_cohort(cfg.cohort, seed)
        n_vox = {sid: s.n_voxels for sid, s in cohort.subjects.items() if sid != cfg.new_subject}
        shared = build_shared_model(cfg, n_vox, seed=seed)
        bare = init_adapted(shared, cohort, cfg)
        head = init_ridge_head(cfg.new_subject, bare.head.n_voxels, shared.backbone.d0, make_rng(seed, "untrained"))
        model = AdaptedModel(shared, head, bare.adapters, bare.projector, bare.scaler)
        m = evaluate(model, cohort, cfg, with_maps=False).metrics
        ret.append((m["image_retrieval"] + m["brain_retrieval"]) / 2)
        two.append((m["two_way_high"] + m["two_way_low"]) / 2)
    r, w = float(np.mean(ret)), float(np.mean(two))
    verdict(5, "chance levels", abs(r - 100 / 300) <= 0.5 and abs(w - 50) <= 3,
            f"retrieval {r:.2f}% (chance 0.33), two-way {w:.1f}% (chance 50)")


def test_c06_fingerprint_reproduction():
    t0 = time.perf_counter()
    fits = [run_fingerprint_experiment(FingerprintConfig(), s) for s in SEEDS]
    rw, rb = np.mean([f.r_within for f in fits]), np.mean([f.r_between for f in fits])
    elapsed = time.perf_counter() - t0
    verdict(6, "fingerprint reproduction", 0.56 <= rw <= 0.86 and 0.07 <= rb <= 0.37 and elapsed < 120,
            f"r_within {rw:.3f}, r_between {rb:.3f}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# trained models on the default cohort
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c07_ablation_direction(runs):
    variants = ("ridge-only", "lora-only", "lora-skip")
    brain = {v: runs.mean(v, "brain_retrieval") for v in variants}
    minutes = runs.cost(variants) / 60
    ok = (brain["lora-skip"] - brain["ridge-only"] >= 5
          and brain["ridge-only"] <= brain["lora-only"] <= brain["lora-skip"] and minutes < 20)
    verdict(7, "ablation direction", ok,
            "brain retrieval " + ", ".join(f"{v} {b:.1f}" for v, b in brain.items()) + f"; {minutes:.1f} min")


@pytest.mark.slow
def test_c08_nonlinear_head(runs):
    keys = ("image_retrieval", "brain_retrieval")
    full = {k: runs.mean("full", k) for k in keys}
    nonlin = {k: runs.mean("nonlinear-head", k) for k in keys}
    verdict(8, "non-linear head", all(nonlin[k] < full[k] for k in keys),
            "; ".join(f"{k} full {full[k]:.1f} vs non-linear {nonlin[k]:.1f}" for k in keys))


@pytest.mark.slow
def test_c09_rank_robustness(runs):
    seeds = range(3)
    keys = ("image_retrieval", "brain_retrieval")
    table = {r: {k: runs.mean(f"rank{r}", k, seeds) for k in keys} for r in (4, 8, 16)}
    spread = {k: max(t[k] for t in table.values()) - min(t[k] for t in table.values()) for k in keys}
    verdict(9, "rank robustness", all(s <= 3 for s in spread.values()),
            "spread " + ", ".join(f"{k} {s:.1f} pt" for k, s in spread.items()))


@pytest.mark.slow
def test_c10_importance_localization(runs):
    skip_gap, ridge_gap = [], []
    for s in SEEDS:
        m = runs(s, "full")
        skip_gap.append(m["importance_skip_lora_fingerprint"] - m["importance_skip_lora_other"])
        ridge_gap.append(m["importance_ridge_fingerprint"] - m["importance_ridge_other"])
    wins = int(sum(g > 0 for g in skip_gap))
    ok = wins >= 4 and np.mean(ridge_gap) <= 0.5 * np.mean(skip_gap)
    verdict(10, "importance localization", ok,
            f"skip F_s > rest in {wins}/5 seeds, mean gap skip {np.mean(skip_gap):+.3f}, ridge {np.mean(ridge_gap):+.3f}")


@pytest.mark.slow
def test_c11_semantic_correction(runs):
    oracle = min(runs(s, "full")["semantic_accuracy_oracle"] for s in SEEDS)
    acc = runs.mean("full", "semantic_accuracy")
    chance = runs(0, "full")["semantic_chance"]
    verdict(11, "semantic correction", oracle == 100.0 and acc >= 10 * chance,
            f"oracle min {oracle:.1f}%, fine-tuned {acc:.1f}% (10x chance {10 * chance:.1f}%)")


def test_c12_determinism(tmp_path):
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY))
    blobs = []
    for run in ("a", "b"):
        d = tmp_path / run
        for args in (["gen-cohort", "--config", cfg_path, "--out", d / "data"],
                     ["pretrain", "--dataset", d / "data", "--config", cfg_path, "--out", d / "shared"],
                     ["finetune", "--dataset", d / "data", "--checkpoint", d / "shared", "--out", d / "ft"],
                     ["eval", "--dataset", d / "data", "--checkpoint", d / "ft", "--out", d / "eval"]):
            res = CliRunner().invoke(main, [str(a) for a in args])
            assert res.exit_code == 0, res.output
        blobs.append((d / "eval" / "metrics.json").read_bytes())
    n = len(json.loads(blobs[0])["metrics"])
    verdict(12, "determinism", blobs[0] == blobs[1], f"metrics.json ({n} metrics) byte-identical across two runs"
            if blobs[0] == blobs[1] else "metrics.json differs between runs")
