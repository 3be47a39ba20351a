"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line that is printed in the terminal summary.
The slow ones train real (tiny) models on the synthetic dataset.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from oracles import (
    brute_metrics,
    counting_first_hit,
    fd_gradient,
    mean_colour_softmax_oracle,
    mp_cross_entropy,
    random_metric_instance,
    stripe_mean_oracle,
)
from sanreid import kernels
from sanreid.cli import ABLATION_ROWS, run_ablation
from sanreid.config import RunConfig
from sanreid.evaluation import build_protocol, compute_cmc, compute_map, evaluate_model
from sanreid.loss import NO_ATTRIBUTE, cross_entropy, cross_entropy_full, one_hot, total_loss
from sanreid.network import SanModel
from sanreid.softlabel import assign_soft_labels, train_attr_predictor, withhold_attributes
from sanreid.synth import synth_generate
from sanreid.training import train

SYNTH_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synth_tiny.json"


def backends():
    names = ["numpy"]
    if kernels.BACKEND == "numba":
        names.append("numba")
    return [kernels.backend(n) for n in names]


@pytest.fixture(scope="module")
def synth20(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth20")
    return synth_generate(root, num_ids=20, imgs_per_id=8, num_attrs=4, seed=0, size=128, holdout=3)


# ------------------------------------------------------------ 1


def test_c1_hap_adjoint_and_gradient(acceptance_log):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_fd = worst_adj = 0.0
    ref = kernels.backend("numpy")
    for _ in range(50):
        q = int(rng.choice([1, 2, 4, 8, 16]))
        m = q * int(rng.integers(1, 32 // q + 1))
        c = int(rng.integers(1, 5))
        F = rng.normal(size=(m, m, c))
        dP = rng.normal(size=(q, c))
        f = lambda X: float(np.sum(kernels.hap_forward(X, q, impl=ref) * dP))
        n_entries = m * m * c
        if n_entries <= 512:
            entries = list(np.ndindex(m, m, c))
        else:
            entries = [tuple(int(rng.integers(s)) for s in (m, m, c)) for _ in range(256)]
        fd = fd_gradient(f, F, entries=entries)
        for impl in backends():
            dF = kernels.hap_backward(dP, m, impl=impl)
            got = np.array([dF[idx] for idx in entries])
            worst_fd = max(worst_fd, np.max(np.abs(got - fd)) / np.max(np.abs(fd)))
            lhs = np.sum(kernels.hap_forward(F, q, impl=impl) * dP)
            rhs = np.sum(F * dF)
            worst_adj = max(worst_adj, abs(lhs - rhs) / max(abs(lhs), 1e-12))
    elapsed = time.perf_counter() - t0
    passed = worst_fd < 1e-4 and worst_adj < 1e-6 and elapsed < 30
    acceptance_log("1 HAP adjoint + gradient", passed,
                   f"max FD rel err {worst_fd:.2e}, adjoint rel err {worst_adj:.2e}, {elapsed:.1f}s")
    assert worst_fd < 1e-4
    assert worst_adj < 1e-6
    assert elapsed < 30


# ------------------------------------------------------------ 2


def test_c2_hap_oracle_equivalence(acceptance_log):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    F = rng.normal(size=(16, 16, 4))
    p1 = (F[0].sum(axis=0) + F[1].sum(axis=0)) / 32
    for impl in backends():
        worked = kernels.hap_forward(F, 8, impl=impl)[0]
        worst = max(worst, np.max(np.abs(worked - p1) / np.abs(p1)))
    for _ in range(100):
        q = int(rng.choice([1, 2, 4, 8]))
        m = q * int(rng.integers(1, 32 // q + 1))
        F = rng.normal(size=(m, m, int(rng.integers(1, 6))))
        oracle = stripe_mean_oracle(F, q)
        for impl in backends():
            got = kernels.hap_forward(F, q, impl=impl)
            worst = max(worst, np.max(np.abs(got - oracle) / np.maximum(np.abs(oracle), 1e-12)))
    elapsed = time.perf_counter() - t0
    passed = worst < 1e-6 and elapsed < 10
    acceptance_log("2 HAP oracle equivalence", passed, f"max rel err {worst:.2e} on 100 maps + worked case, {elapsed:.1f}s")
    assert worst < 1e-6
    assert elapsed < 10


# ------------------------------------------------------------ 3


def test_c3_loss_identities(acceptance_log):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst_sum = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 60))
        z = rng.normal(scale=rng.uniform(0.1, 10), size=k)
        t = int(rng.integers(k))
        worst_sum = max(worst_sum, abs(cross_entropy_full(z, one_hot(t, k)) - cross_entropy(z, t)))
    worked_ok = abs(cross_entropy([1.0, 2.0, 3.0], 2) - mp_cross_entropy([1.0, 2.0, 3.0], 2)) < 1e-14

    decomposition_ok = True
    worst_grad = 0.0
    for trial in range(20):
        n, q, C, M = int(rng.integers(1, 6)), int(rng.choice([2, 4, 8])), int(rng.integers(2, 8)), int(rng.integers(2, 5))
        g = torch.Generator().manual_seed(trial)
        out = {
            "stripe_logits": [torch.randn(n, C, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(q)],
            "id_logits": torch.randn(n, C, generator=g, dtype=torch.float64, requires_grad=True),
            "attr_logits": torch.randn(n, M, generator=g, dtype=torch.float64, requires_grad=True),
        }
        ids = torch.from_numpy(rng.integers(0, C, n))
        attrs = torch.from_numpy(np.where(rng.random(n) < 0.3, NO_ATTRIBUTE, rng.integers(0, M, n)))
        br = total_loss(out, ids, attrs)
        decomposition_ok &= br.total.item() == (sum(br.stripe_losses) + br.id_loss + br.attr_loss).item()
        # scalar re-summation against the reference cross-entropy
        hand = sum(np.mean([cross_entropy(lg[i].detach().numpy(), int(ids[i])) for i in range(n)]) for lg in out["stripe_logits"])
        hand += np.mean([cross_entropy(out["id_logits"][i].detach().numpy(), int(ids[i])) for i in range(n)])
        lab = [i for i in range(n) if attrs[i] != NO_ATTRIBUTE]
        hand += np.mean([cross_entropy(out["attr_logits"][i].detach().numpy(), int(attrs[i])) for i in lab]) if lab else 0.0
        decomposition_ok &= abs(br.total.item() - hand) < 1e-10
        if trial < 5:
            br.total.backward()
            leaves = [*out["stripe_logits"], out["id_logits"], out["attr_logits"]]
            for leaf in leaves:
                base = leaf.detach().numpy().copy()

                def f(X, leaf=leaf):
                    with torch.no_grad():
                        saved = leaf.data.clone()
                        leaf.data.copy_(torch.from_numpy(X))
                        val = total_loss(out, ids, attrs).total.item()
                        leaf.data.copy_(saved)
                    return val

                fd = fd_gradient(f, base)
                an = leaf.grad.numpy()
                if np.abs(fd).max() > 0:
                    worst_grad = max(worst_grad, np.abs(an - fd).max() / np.abs(fd).max())
    elapsed = time.perf_counter() - t0
    passed = worst_sum < 1e-12 and worked_ok and decomposition_ok and worst_grad < 1e-4 and elapsed < 60
    acceptance_log("3 loss identities", passed,
                   f"full-sum vs simplified {worst_sum:.1e}, decomposition exact={decomposition_ok}, "
                   f"grad rel err {worst_grad:.1e}, {elapsed:.1f}s")
    assert worst_sum < 1e-12 and worked_ok
    assert decomposition_ok
    assert worst_grad < 1e-4
    assert elapsed < 60


# ------------------------------------------------------------ 4


def test_c4_descriptor_contract(acceptance_log):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    model = SanModel(num_identities=10, num_attributes=4).eval()
    with torch.no_grad():
        out = model(torch.randn(2, 3, 256, 256))
    desc, red, g = out["descriptors"], out["reduced"], out["global"]
    exact = all(torch.equal(desc[:, i * 512:(i + 1) * 512], red[:, i]) for i in range(8))
    exact &= torch.equal(desc[:, 8 * 512:], g)
    elapsed = time.perf_counter() - t0
    passed = desc.shape == (2, 6144) and tuple(out["feature_map"].shape[1:]) == (2048, 16, 16) and exact and elapsed < 5
    acceptance_log("4 descriptor contract", passed, f"dim {desc.shape[1]}, slices bit-exact={exact}, {elapsed:.1f}s")
    assert desc.shape == (2, 6144)
    assert tuple(out["feature_map"].shape[1:]) == (2048, 16, 16)
    assert exact
    assert elapsed < 5


# ------------------------------------------------------------ 5


def test_c5_metrics_oracle(acceptance_log):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst_map, cmc_exact, checked = 0.0, True, 0
    while checked < 200:
        nq, ng = int(rng.integers(1, 51)), int(rng.integers(1, 101))
        inst = random_metric_instance(rng, nq, ng, int(rng.integers(1, 12)), tie_levels=5 if checked % 3 == 0 else None)
        try:
            cmc, mAP = brute_metrics(*inst, max_rank=20)
        except ZeroDivisionError:
            continue
        cmc_exact &= np.array_equal(compute_cmc(*inst, max_rank=20), cmc)
        worst_map = max(worst_map, abs(compute_map(*inst) - mAP))
        checked += 1
    hand = compute_map(np.array([[0.1, 0.2, 0.3, 0.4]]), [1], [1, 0, 1, 0])
    hand_ok = abs(hand - 5 / 6) < 1e-15
    rank3 = compute_cmc(np.array([[0.1, 0.2, 0.3, 0.4]]), [1], [0, 0, 1, 0], max_rank=4).tolist() == [0, 0, 1, 1]
    assert counting_first_hit([0.1, 0.2, 0.3, 0.4], 1, [0, 0, 1, 0], [False] * 4) == 2
    elapsed = time.perf_counter() - t0
    passed = cmc_exact and worst_map < 1e-10 and hand_ok and rank3 and elapsed < 30
    acceptance_log("5 metrics oracle", passed,
                   f"200 instances, CMC exact={cmc_exact}, max mAP err {worst_map:.1e}, AP=5/6 ok={hand_ok}, {elapsed:.1f}s")
    assert cmc_exact and worst_map < 1e-10
    assert hand_ok and rank3
    assert elapsed < 30


# ------------------------------------------------------------ 6

VEHICLEID_COUNTS = {800: (800, 6532), 1600: (1600, 11395), 2400: (2400, 17638)}
VERI_COUNTS = (1678, 11579)


def test_c6_protocol_counts(acceptance_log):
    from sanreid.adapters import load_vehicleid, load_veri

    vid_root = os.environ.get("SANREID_VEHICLEID_ROOT")
    veri_root = os.environ.get("SANREID_VERI_ROOT")
    if not vid_root and not veri_root:
        acceptance_log("6 protocol counts", None,
                       "skipped: set SANREID_VEHICLEID_ROOT / SANREID_VERI_ROOT to the released datasets")
        pytest.skip("official VehicleID / VeRi split files not available")
    got = {}
    ok = True
    if vid_root:
        for size, want in VEHICLEID_COUNTS.items():
            p = build_protocol(load_vehicleid(vid_root, size), "vehicleid")
            got[f"Test{size}"] = (len(p.gallery), len(p.query))
            ok &= got[f"Test{size}"] == want
    if veri_root:
        p = build_protocol(load_veri(veri_root), "veri")
        got["VeRi"] = (len(p.query), len(p.gallery))
        ok &= got["VeRi"] == VERI_COUNTS
    acceptance_log("6 protocol counts", ok, str(got))
    assert ok, got


# ------------------------------------------------------------ 7


@pytest.mark.slow
def test_c7_synthetic_overfit(acceptance_log, synth20):
    cfg = RunConfig.load(SYNTH_CONFIG).replace(branch="full", q=8, seed=0, epochs=220, lr_step=160)
    t0 = time.perf_counter()
    model, history = train(cfg, synth20, write=False)
    report = evaluate_model(model, synth20, "plain", mean=cfg.pixel_mean, std=cfg.pixel_std)
    elapsed = time.perf_counter() - t0
    steps_per_epoch = len(history) // cfg.epochs
    first = np.mean([h["total"] for h in history[:steps_per_epoch]])
    last = np.mean([h["total"] for h in history[-steps_per_epoch:]])
    drop = 1 - last / first
    passed = report.rank1 >= 0.95 and drop >= 0.9 and elapsed < 600
    acceptance_log("7 synthetic overfit", passed,
                   f"rank-1 {report.rank1:.3f}, mAP {report.map:.3f}, loss drop {drop:.1%}, {elapsed:.0f}s")
    assert report.rank1 >= 0.95
    assert drop >= 0.9
    assert elapsed < 600


# ------------------------------------------------------------ 8


@pytest.mark.slow
def test_c8_ablation_trend(acceptance_log, synth20):
    cfg = RunConfig.load(SYNTH_CONFIG)
    rows = [r for r in ABLATION_ROWS if r[0] in ("L_ID", "stripe q=2", "stripe q=8", "SAN q=8")]
    t0 = time.perf_counter()
    table = {row["setting"]: row for row in run_ablation(cfg, synth20, seeds=(0, 1, 2), rows=rows)}
    elapsed = time.perf_counter() - t0
    r1 = {k: round(v["rank1"], 3) for k, v in table.items()}
    q_trend = table["stripe q=8"]["rank1"] >= table["stripe q=2"]["rank1"]
    san_trend = table["SAN q=8"]["rank1"] >= table["L_ID"]["rank1"]
    passed = q_trend and san_trend and elapsed < 45 * 60
    acceptance_log("8 ablation trend", passed, f"mean rank-1 over 3 seeds {r1}, {elapsed / 60:.1f} min")
    assert q_trend, r1
    assert san_trend, r1
    assert elapsed < 45 * 60


# ------------------------------------------------------------ 9


@pytest.mark.slow
def test_c9_soft_label_fidelity(acceptance_log, synth20):
    cfg = RunConfig.load(SYNTH_CONFIG)
    stripped, withheld = withhold_attributes(synth20, 0.3, seed=0)
    t0 = time.perf_counter()

    # the task is learnable from colour statistics alone
    def mean_colour(idx):
        return np.stack([np.asarray(Image.open(stripped.resolve(stripped.records[i])), float).mean(axis=(0, 1))
                         for i in idx])

    hard = [i for i, r in enumerate(stripped.records) if r.split == "train" and r.has_hard_attribute]
    held = sorted(withheld)
    oracle_pred = mean_colour_softmax_oracle(
        mean_colour(hard), np.array([stripped.records[i].attribute for i in hard]), mean_colour(held), 4
    )
    oracle_acc = float(np.mean(oracle_pred == np.array([withheld[i] for i in held])))

    predictor = train_attr_predictor(stripped, cfg)
    labelled = assign_soft_labels(stripped, predictor, cfg.pixel_mean, cfg.pixel_std)
    recovered = float(np.mean([labelled.records[i].attribute == a for i, a in withheld.items()]))
    untouched = all(labelled.records[i] == r for i, r in enumerate(stripped.records) if r.attribute is not None)
    soft_flags = all(labelled.records[i].attribute_is_soft for i in withheld)
    again = assign_soft_labels(labelled, predictor, cfg.pixel_mean, cfg.pixel_std)
    idempotent = again.records == labelled.records
    elapsed = time.perf_counter() - t0
    passed = recovered >= 0.95 and untouched and soft_flags and idempotent and elapsed < 600
    acceptance_log("9 soft-label fidelity", passed,
                   f"recovered {recovered:.1%} of {len(withheld)} withheld (colour oracle {oracle_acc:.1%}), "
                   f"idempotent={idempotent}, {elapsed:.0f}s")
    assert oracle_acc >= 0.95
    assert recovered >= 0.95
    assert untouched and soft_flags and idempotent
    assert elapsed < 600
