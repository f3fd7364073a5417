"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N [PASS|FAIL] ...`` line (also collected in
the terminal summary) and then asserts, so a failure is both visible and fatal.
"""

import math
import statistics
import time

import numpy as np
import pytest
import torch

from conftest import record_criterion
from oracles import directional_fd_errors, global_attention, hand_metrics, naive_cswin
from scanscd.backbone import TED, ChangeBranch, Neck, init_conv_weights
from scanscd.cli import main
from scanscd.config import ModelConfig, TrainConfig
from scanscd.data import GeneratorSpec, ScdDataset, generate_sample
from scanscd.metrics import metrics_report
from scanscd.model import build_model
from scanscd.objectives import (loss_change, loss_psd, loss_sc, loss_sem, make_pseudo_labels)
from scanscd.scanformer import (AttentionBlock, CSWinAttention, detokenize,
                                init_transformer_weights, stripe_attention, tokenize)
from scanscd.trainer import evaluate, fit
from scanscd.types import validate_sample

HAND = [[40, 5, 5], [4, 20, 1], [2, 3, 20]]


def test_criterion_1_metric_oracles():
    start = time.perf_counter()
    got = metrics_report(HAND).values()
    ref = hand_metrics(HAND)
    stated = {"oa": 0.8, "iou_nc": 40 / 56, "iou_c": 44 / 60, "miou": 0.723810, "rho": 2 / 3,
              "eta": 0.391667, "sek": 0.34623, "p_scd": 0.8, "r_scd": 40 / 54, "f_scd": 10 / 13}
    worst = max(max(abs(got[k] - ref[k]), abs(got[k] - v)) for k, v in stated.items())
    perfect = metrics_report(np.diag([30, 10, 10, 5])).values()
    perfect_ok = all(perfect[k] == 1.0 for k in ("oa", "miou", "sek", "f_scd", "p_scd", "r_scd"))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-4 and perfect_ok and elapsed < 1.0
    record_criterion(1, "metric oracle suite", passed,
                     f"max deviation {worst:.2e}, perfect prediction exact={perfect_ok}, "
                     f"{elapsed:.3f}s")
    assert passed


def test_criterion_2_attention_oracle():
    start = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        torch.manual_seed(trial)
        inside = trial % 2 == 1
        attn = CSWinAttention(24, (16, 16), 2, 2, inside)
        with torch.no_grad():
            for p in attn.parameters():
                p.normal_(0, 0.3)
        x = torch.randn(1, 256, 24)
        with torch.no_grad():
            diff = (attn(x)[0] - naive_cswin(x[0], attn, inside)).abs().max().item()
        worst = max(worst, diff)
    torch.manual_seed(0)
    glob = CSWinAttention(24, (4, 4), 4, 2)
    with torch.no_grad():
        for p in glob.parameters():
            p.normal_(0, 0.3)
        glob.bias_horizontal.zero_()
        glob.bias_vertical.zero_()
        x = torch.randn(1, 16, 24)
        global_diff = (glob(x)[0] - global_attention(x[0], glob)).abs().max().item()
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-5 and global_diff <= 1e-5 and elapsed < 30
    record_criterion(2, "attention oracle", passed,
                     f"100 trials max |diff| {worst:.2e}, global case {global_diff:.2e}, "
                     f"{elapsed:.1f}s")
    assert passed


def _loss_cases():
    gen = torch.Generator().manual_seed(7)
    kw = {"generator": gen, "dtype": torch.float64}
    z1 = torch.randn(1, 3, 4, 4, **kw).requires_grad_()
    z2 = torch.randn(1, 3, 4, 4, **kw).requires_grad_()
    zc = torch.randn(1, 1, 4, 4, **kw).requires_grad_()
    mask = (torch.rand(1, 4, 4, generator=gen) < 0.5).long()
    base = (torch.rand(1, 4, 4, generator=gen) * 3).long() + 1
    l1, l2 = base * mask, ((base % 3) + 1) * mask
    with torch.no_grad():
        pseudo = make_pseudo_labels(z1.softmax(1), z2.softmax(1), mask, 0.3)
    return {
        "L_sem": (lambda: loss_sem(z1.softmax(1), z2.softmax(1), l1, l2), [z1, z2]),
        "L_psd": (lambda: loss_psd(z1.softmax(1), z2.softmax(1), pseudo), [z1, z2]),
        "L_sc": (lambda: loss_sc(z1.softmax(1), z2.softmax(1), mask), [z1, z2]),
        "L_chg": (lambda: loss_change(torch.sigmoid(zc), mask), [zc]),
    }


def _module_case(module, inputs, out_shape, seed):
    torch.manual_seed(seed)
    module = module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.2 * torch.randn_like(p))
    xs = [torch.randn(*s, dtype=torch.float64, requires_grad=True) for s in inputs]
    w = torch.randn(*out_shape, dtype=torch.float64)
    return (lambda: (module(*xs) * w).sum()), [*xs, *module.parameters()]


def test_criterion_3_gradient_suite():
    start = time.perf_counter()
    cases = _loss_cases()
    torch.manual_seed(3)
    block = AttentionBlock(12, (4, 4), 2, 2)
    init_transformer_weights(block)
    cases["attention block"] = _module_case(block, [(1, 16, 12)], (1, 16, 12), 3)
    neck = Neck(4, 6, 6)
    init_conv_weights(neck)
    cases["neck"] = _module_case(neck, [(1, 4, 8, 8), (1, 6, 4, 4)], (1, 6, 8, 8), 2)
    branch = ChangeBranch(4, 2)
    init_conv_weights(branch)
    cases["change branch"] = _module_case(branch, [(1, 4, 4, 4)] * 2, (1, 4, 4, 4), 1)
    worst = {name: max(directional_fd_errors(fn, tensors, probes=20))
             for name, (fn, tensors) in cases.items()}
    elapsed = time.perf_counter() - start
    passed = max(worst.values()) <= 1e-4 and elapsed < 120
    record_criterion(3, "gradient suite", passed,
                     ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                     + f" (20 probes each), {elapsed:.1f}s")
    assert passed


def test_criterion_4_structural_invariants():
    start = time.perf_counter()
    checks = {}
    cfg = ModelConfig(height=16, width=16, channels_u=8, channels_v=8, change_layers=2,
                      stripe_width=2, attention_layers=1, heads_per_group=2)
    torch.manual_seed(0)
    ted = TED(cfg)
    init_conv_weights(ted)
    ted.eval()
    i1, i2 = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        fwd, rev = ted(i1, i2), ted(i2, i1)
    checks["swap equivariance"] = torch.equal(rev.x1, fwd.x2) and torch.equal(rev.x2, fwd.x1)

    feats = [torch.randn(2, 16, 8, 8) for _ in range(3)]
    back = detokenize(tokenize(*feats), 8, 8)
    checks["tokenize round trip"] = all(torch.equal(a, b) for a, b in zip(back, feats))

    block = AttentionBlock(12, (4, 4), 2, 2)
    block.zero_residual()
    x = torch.randn(2, 16, 12)
    checks["zero-residual identity"] = torch.equal(block(x), x)

    q, k = torch.randn(4, 32, 6), torch.randn(4, 32, 6)
    weights = stripe_attention(q, k, torch.eye(32).expand(4, 32, 32))
    checks["softmax rows"] = bool(((weights.sum(-1) - 1).abs() <= 1e-6).all())

    monotone, in_range = True, True
    for seed in range(50):
        gen = torch.Generator().manual_seed(seed)
        p1 = torch.randn(2, 5, 8, 8, generator=gen).mul(3).softmax(1)
        p2 = torch.randn(2, 5, 8, 8, generator=gen).mul(3).softmax(1)
        mask = (torch.rand(2, 8, 8, generator=gen) < 0.3).float()
        counts = [int((make_pseudo_labels(p1, p2, mask, t) != 0).sum())
                  for t in (0.0, 0.3, 0.6, 0.8, 0.9, 0.99, 1.0)]
        monotone &= counts == sorted(counts, reverse=True)
        value = float(loss_sc(p1, p2, mask))
        in_range &= 0.0 <= value <= 1.0
    checks["pseudo-label monotonicity"] = monotone
    checks["loss_sc range"] = in_range
    elapsed = time.perf_counter() - start
    passed = all(checks.values()) and elapsed < 60
    record_criterion(4, "structural invariants", passed,
                     ", ".join(f"{k}={'ok' if v else 'broken'}" for k, v in checks.items())
                     + f", {elapsed:.1f}s")
    assert passed


@pytest.mark.slow
def test_criterion_5_desk_scale_overfit(tmp_path):
    start = time.perf_counter()
    spec = GeneratorSpec(count=8, seed=7)
    ds = ScdDataset.from_samples([generate_sample(spec, i).sample for i in range(8)])
    model = build_model(ModelConfig(), 0)
    tc = TrainConfig(epochs=200, batch_size=8, augment=False, eval_every=0)
    losses = []
    fit(model, ds, None, tc, tmp_path, on_step=lambda rec: losses.append(rec["total"]))
    report = evaluate(model, ds).report
    elapsed = time.perf_counter() - start
    passed = (len(losses) <= 500 and report.f_scd >= 0.90 and report.miou >= 0.90
              and losses[-1] < losses[0] and elapsed <= 600)
    record_criterion(5, "desk-scale overfit", passed,
                     f"{len(losses)} steps, F_scd {report.f_scd:.4f}, mIoU {report.miou:.4f}, "
                     f"loss {losses[0]:.3f} -> {losses[-1]:.3f}, {elapsed:.0f}s")
    assert passed


@pytest.mark.slow
def test_criterion_6_learning_scheme_direction(tmp_path):
    start = time.perf_counter()
    spec = GeneratorSpec(count=250, seed=2024)
    samples = [generate_sample(spec, i).sample for i in range(250)]
    train, val = ScdDataset.from_samples(samples[:200]), ScdDataset.from_samples(samples[200:])
    cfg = ModelConfig(channels_u=16, channels_v=32)
    scores = {True: [], False: []}
    for enabled in (True, False):
        weight = 1.0 if enabled else 0.0
        for seed in (0, 1, 2):
            tc = TrainConfig(epochs=10, seed=seed, eval_every=0, lambda_psd=weight,
                             lambda_sc=weight)
            model = build_model(cfg, seed)
            fit(model, train, None, tc, tmp_path / f"{enabled}{seed}")
            scores[enabled].append(evaluate(model, val).report.f_scd)
    on, off = statistics.median(scores[True]), statistics.median(scores[False])
    elapsed = time.perf_counter() - start
    passed = on >= off - 0.01 and elapsed <= 3600
    record_criterion(6, "learning-scheme direction", passed,
                     f"median val F_scd with scheme {on:.4f}, without {off:.4f} "
                     f"(runs {[round(s, 4) for s in scores[True]]} vs "
                     f"{[round(s, 4) for s in scores[False]]}), {elapsed:.0f}s")
    assert passed


TINY_OVERRIDES = [
    "model.height=16", "model.width=16", "model.channels_u=8", "model.channels_v=8",
    "model.change_layers=2", "model.stripe_width=2", "model.attention_layers=1",
    "model.heads_per_group=2", "train.batch_size=4", "train.epochs=3",
]


def test_criterion_7_determinism(tmp_path):
    spec = tmp_path / "gen.cfg"
    spec.write_text("height = 16\nwidth = 16\n")
    assert main(["generate", "--spec", str(spec), "--count", "16", "--seed", "11",
                 "--out", str(tmp_path / "data")]) == 0
    base = ["train", "--data", str(tmp_path / "data"), "--seed", "5"]
    for item in TINY_OVERRIDES:
        base += ["--override", item]
    for name in ("a", "b"):
        assert main(base + ["--out", str(tmp_path / name)]) == 0
    assert main(base + ["--out", str(tmp_path / "r"), "--stop-after-epoch", "1"]) == 0
    assert main(base + ["--out", str(tmp_path / "r"),
                        "--resume", str(tmp_path / "r" / "last.ckpt")]) == 0

    def logs(name):
        return [(tmp_path / name / f).read_text() for f in ("train.log", "metrics.log")]

    repeat = logs("a") == logs("b")
    resumed = logs("r") == logs("a")
    weights = (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
    passed = repeat and resumed and weights
    record_criterion(7, "determinism", passed,
                     f"repeat logs identical={repeat}, checkpoints identical={weights}, "
                     f"resume equals uninterrupted={resumed}")
    assert passed


def test_criterion_8_generator_statistics():
    spec = GeneratorSpec(count=500, seed=8)
    pairs, probs = spec.transition_table()
    counts = dict.fromkeys(pairs, 0)
    changed = total = 0
    invalid = 0
    for i in range(spec.count):
        gen = generate_sample(spec, i)
        invalid += bool(validate_sample(gen.sample))
        changed += int((gen.sample.label1 != 0).sum())
        total += gen.sample.label1.size
        for pair in gen.draws:
            counts[pair] += 1
    draws = sum(counts.values())
    worst = max(abs(counts[pr] - draws * p) / math.sqrt(draws * p * (1 - p))
                for pr, p in zip(pairs, probs))
    fraction = changed / total
    passed = abs(fraction - 0.20) <= 0.05 and worst <= 3 and invalid == 0
    record_criterion(8, "generator statistics", passed,
                     f"change fraction {fraction:.4f}, worst transition deviation {worst:.2f} "
                     f"sigma over {draws} draws, invalid samples {invalid}")
    assert passed
