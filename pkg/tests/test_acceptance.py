"""One test per release criterion; `pytest -v tests/test_acceptance.py`
prints one pass/fail line per criterion. Tolerances are stated inline.
"""

import csv
import functools
import json
import os
import time

import numpy as np
import pytest
import torch

import reference as ref
from bimodal_ml.attention import scaled_dot_attention
from bimodal_ml.backbones import BranchSpec, JointModel, forward_joint
from bimodal_ml.cli import main
from bimodal_ml.data import (
    DatasetSpec,
    bundled_mapping_path,
    generate,
    load_mapping,
)
from bimodal_ml.evaluation import (
    average_precision,
    report_from_scores,
    run_protocol,
    write_metrics_csv,
)
from bimodal_ml.fusion_head import superpose
from bimodal_ml.losses import (
    LossWeights,
    cross_entropy,
    kld,
    softmax,
    tr_kld_reg,
    tr_kld_reg_grad,
    weighted_total,
)
from bimodal_ml.trainer import TrainConfig, lr_at

OVERLAP9 = (
    "Advertisement",
    "Email",
    "Form",
    "Letter",
    "Memo",
    "News article",
    "Resume",
    "Scientific publication",
    "Scientific report",
)


def criterion(number, label):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"CRITERION {number:2d}: FAIL - {label}")
                raise
            print(f"CRITERION {number:2d}: PASS - {label}")

        return wrapper

    return decorate


def t64(values):
    return torch.tensor(values, dtype=torch.float64)


def bundled_config(name):
    import bimodal_ml

    return os.path.join(os.path.dirname(bimodal_ml.__file__), "configs", name)


@criterion(1, "loss oracle equivalence, rel err < 1e-10 over 1000 pairs")
def test_criterion_01_loss_oracles():
    started = time.monotonic()
    rng = np.random.default_rng(101)
    for p_target, p_current in ref.random_prob_pairs(rng, 1000):
        got_tr = float(tr_kld_reg(t64(p_target), t64(p_current)))
        got_kl = float(kld(t64(p_target), t64(p_current)))
        assert ref.rel_err(got_tr, ref.tr_kld_mp(p_target, p_current)) < 1e-10
        assert ref.rel_err(got_kl, ref.kld_mp(p_target, p_current)) < 1e-10
    assert abs(float(tr_kld_reg(t64([0.2, 0.8]), t64([0.4, 0.6]))) - 0.230146) < 1e-6
    assert abs(float(kld(t64([0.2, 0.8]), t64([0.4, 0.6]))) - 0.091517) < 1e-6
    assert abs(float(tr_kld_reg(t64([1.0, 0.0]), t64([0.5, 0.5]))) - 0.693147) < 1e-6
    assert time.monotonic() - started < 5.0


@criterion(2, "tr_kld_reg >= kld >= 0 on 10k pairs; tr(p,p) = 0 exactly")
def test_criterion_02_divergence_ordering():
    rng = np.random.default_rng(202)
    violations = 0
    for p_target, p_current in ref.random_prob_pairs(rng, 10_000):
        tr = float(tr_kld_reg(t64(p_target), t64(p_current)))
        kl = float(kld(t64(p_target), t64(p_current)))
        if not (tr >= kl >= 0.0):
            violations += 1
    assert violations == 0
    for p_target, _ in ref.random_prob_pairs(rng, 50):
        assert float(tr_kld_reg(t64(p_target), t64(p_target))) == 0.0


@criterion(3, "analytic gradients match finite differences")
def test_criterion_03_gradient_check():
    rng = np.random.default_rng(303)
    h = 1e-6
    checked = 0
    for p_target, p_current in ref.random_prob_pairs(rng, 500, floor=0.01):
        analytic = tr_kld_reg_grad(t64(p_target), t64(p_current)).numpy()
        log_ratio = np.log(p_target / p_current)
        for k in range(len(p_current)):
            if abs(log_ratio[k]) < 1e-3:
                continue  # truncation kink: one-sided subgradient
            bump = np.zeros_like(p_current)
            bump[k] = h
            up = float(tr_kld_reg(t64(p_target), t64(p_current + bump)))
            down = float(tr_kld_reg(t64(p_target), t64(p_current - bump)))
            fd = (up - down) / (2 * h)
            assert abs(analytic[k] - fd) / max(abs(fd), 1e-10) < 1e-4
            checked += 1
    assert checked > 500

    # end-to-end: backprop through the full joint model at 20 coordinates
    img = BranchSpec(n_blocks=2, widths=(4, 8), feature_dim=8, n_classes=3, fusion_sites=(0,))
    txt = BranchSpec(
        n_blocks=2, widths=(8, 8), feature_dim=8, n_classes=3, fusion_sites=(0,), vocab_size=12
    )
    model = JointModel(img, txt, seed=3).double()
    g = torch.Generator().manual_seed(7)
    images = torch.randn(6, 10, 10, generator=g, dtype=torch.float64)
    tokens = torch.randint(0, 12, (6, 5), generator=g)
    labels = torch.randint(0, 3, (6,), generator=g)
    weights = LossWeights()

    def kink_margin():
        # smallest |log q/p| across the mimicry pair; the loss is only
        # differentiable away from the truncation boundary, and at a fresh
        # init both branches emit near-uniform rows that sit right on it
        with torch.no_grad():
            li, lt, _, _ = model(images, tokens, attention_enabled=True)
            ratio = torch.log(softmax(li)) - torch.log(softmax(lt))
        return float(ratio.abs().min())

    assert kink_margin() > 1e-4

    # the training loss stops gradients at the mimicry targets and the fused
    # features, so the finite-difference probe must hold those frozen too
    with torch.no_grad():
        li0, lt0, x10, x20 = model(images, tokens, attention_enabled=True)
        q_img, q_txt = softmax(li0), softmax(lt0)
        x3 = superpose(x10, x20)

    def loss_value():
        li, lt, _, _ = model(images, tokens, attention_enabled=True)
        p_img, p_txt = softmax(li), softmax(lt)
        l1 = cross_entropy(p_img, labels).mean() + 0.5 * tr_kld_reg(q_txt, p_img).mean()
        l2 = cross_entropy(p_txt, labels).mean() + 0.5 * tr_kld_reg(q_img, p_txt).mean()
        l3 = cross_entropy(softmax(model.fusion_head(x3)), labels).mean()
        return weighted_total(l1, l2, l3, weights)

    model.zero_grad()
    loss_value().backward()
    params = [p for p in model.parameters() if p.grad is not None]
    coord_rng = np.random.default_rng(11)
    for _ in range(20):
        param = params[int(coord_rng.integers(len(params)))]
        flat_index = int(coord_rng.integers(param.numel()))
        analytic = float(param.grad.reshape(-1)[flat_index])
        with torch.no_grad():
            flat = param.reshape(-1)
            original = float(flat[flat_index])
            flat[flat_index] = original + h
            up = float(loss_value())
            flat[flat_index] = original - h
            down = float(loss_value())
            flat[flat_index] = original
        fd = (up - down) / (2 * h)
        assert abs(analytic - fd) / max(abs(fd), 1e-8) < 1e-3


@criterion(4, "attention rows sum to 1; gate bypass equals attention-disabled")
def test_criterion_04_attention_invariants():
    rng = np.random.default_rng(404)
    for _ in range(100):
        rows = int(rng.integers(1, 12))
        width = int(rng.integers(1, 10))
        q = torch.tensor(rng.normal(size=(rows, width)) * 3)
        k = torch.tensor(rng.normal(size=(rows, width)) * 3)
        v = torch.tensor(rng.normal(size=(rows, width)))
        _, weights = scaled_dot_attention(q, k, v)
        sums = weights.sum(dim=-1).numpy()
        assert np.abs(sums - 1.0).max() < 1e-6

    img = BranchSpec(n_blocks=3, widths=(4, 8, 8), feature_dim=8, n_classes=4, fusion_sites=(0, 1))
    txt = BranchSpec(
        n_blocks=3, widths=(8, 8, 8), feature_dim=8, n_classes=4, fusion_sites=(0, 1), vocab_size=16
    )
    model = JointModel(img, txt, seed=9, gate_mode="bypass")
    g = torch.Generator().manual_seed(5)
    images = torch.randn(4, 16, 16, generator=g)
    tokens = torch.randint(0, 16, (4, 9), generator=g)
    with torch.no_grad():
        bypassed = forward_joint(model, images, tokens, attention_enabled=True)
        disabled = forward_joint(model, images, tokens, attention_enabled=False)
    for got, want in zip(bypassed, disabled):
        assert torch.allclose(got, want, atol=1e-9, rtol=0)


@criterion(5, "lr schedule reproduces 1e-3 / 5e-4 / 2.5e-4 at epochs 0/10/25")
def test_criterion_05_schedule_exactness():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-3
    assert lr_at(10, cfg) == 5e-4
    assert lr_at(25, cfg) == 2.5e-4


@pytest.fixture(scope="module")
def negative_transfer_artifact(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("criterion6"))
    config = bundled_config("negative_transfer.yaml")
    assert main(["compare", config, "--out", out, "--quiet"]) == 0
    with open(os.path.join(out, "compare_raw.json")) as fh:
        return json.load(fh)


@criterion(6, "text accuracy: ML_TrKLD >= ML_KLD + 1pt and >= IL - 1pt (5 seeds)")
def test_criterion_06_negative_transfer(negative_transfer_artifact):
    raw = negative_transfer_artifact
    assert raw["seeds"] == [0, 1, 2, 3, 4]
    text = {r: float(np.mean(raw["metrics"][r]["text_accuracy"])) for r in raw["metrics"]}
    print(
        "  text acc: IL=%.4f ML_KLD=%.4f ML_TrKLD=%.4f"
        % (text["IL"], text["ML_KLD"], text["ML_TrKLD"])
    )
    assert text["ML_TrKLD"] >= text["ML_KLD"] + 0.01
    assert text["ML_TrKLD"] >= text["IL"] - 0.01


@pytest.fixture(scope="module")
def fusion_benefit_artifact(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("criterion7"))
    config = bundled_config("fusion_benefit.yaml")
    assert main(["compare", config, "--out", out, "--quiet"]) == 0
    with open(os.path.join(out, "compare_raw.json")) as fh:
        return json.load(fh)


@criterion(7, "EAML fusion >= ML_TrKLD fusion - 0.5pt; fusion >= branches - 0.5pt/seed")
def test_criterion_07_fusion_benefit(fusion_benefit_artifact):
    raw = fusion_benefit_artifact["metrics"]
    eaml_fusion = float(np.mean(raw["EAML_TrKLD"]["fusion_accuracy"]))
    ml_fusion = float(np.mean(raw["ML_TrKLD"]["fusion_accuracy"]))
    print("  fusion acc: EAML_TrKLD=%.4f ML_TrKLD=%.4f" % (eaml_fusion, ml_fusion))
    assert eaml_fusion >= ml_fusion - 0.005
    per_seed = zip(
        raw["EAML_TrKLD"]["fusion_accuracy"],
        raw["EAML_TrKLD"]["image_accuracy"],
        raw["EAML_TrKLD"]["text_accuracy"],
    )
    for fusion, image, text in per_seed:
        assert fusion >= max(image, text) - 0.005


@criterion(8, "average precision matches brute-force oracle to 1e-9")
def test_criterion_08_ap_oracle():
    rng = np.random.default_rng(808)
    checked = 0
    while checked < 200:
        n = int(rng.integers(2, 51))
        labels = (rng.random(n) < 0.4).astype(int)
        if labels.sum() == 0:
            continue
        scores = np.round(rng.random(n), 2)  # coarse scores force ties
        got = average_precision(scores, labels)
        want = ref.average_precision_brute(scores, labels)
        assert abs(got - want) <= 1e-9
        checked += 1
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.83333, abs=1e-5)


@criterion(9, "bundled mapping: reports over the 9 shared classes; fixture CSV")
def test_criterion_09_inter_dataset_protocol(tmp_path):
    tobacco = (
        "Advertisement",
        "Email",
        "Form",
        "Letter",
        "Memo",
        "News",
        "Note",
        "Report",
        "Resume",
        "Scientific",
    )
    spec = DatasetSpec(
        n_classes=10,
        train_per_class=2,
        val_per_class=1,
        test_per_class=3,
        image_size=34,
        token_length=8,
        vocab_size=16,
        text_keyword_rate=0.6,
        label_names=tobacco,
        seed=42,
    )
    dataset = generate(spec)
    img = BranchSpec(n_blocks=2, widths=(4, 8), feature_dim=8, n_classes=10, fusion_sites=(0,))
    txt = BranchSpec(
        n_blocks=2, widths=(8, 8), feature_dim=8, n_classes=10, fusion_sites=(0,), vocab_size=16
    )
    model = JointModel(img, txt, seed=1)
    mapping = load_mapping(bundled_mapping_path("tobacco10_to_overlap9"))
    reports = run_protocol(model, dataset.test, dataset.label_names, mapping=mapping)
    for report in reports.values():
        assert report.label_names == OVERLAP9
        assert report.n_samples == 27  # 30 minus the 3 masked "Note" samples
        assert "Note" in report.metadata["excluded_source_classes"]

    # Table-shaped per-class CSV against a hand-computed 5-sample fixture:
    # two mapped classes X, Y; labels [X, X, Y, Y, Y]; predictions [X, Y, Y, Y, X].
    scores = np.array(
        [
            [0.9, 0.1],
            [0.2, 0.8],
            [0.3, 0.7],
            [0.4, 0.6],
            [0.8, 0.2],
        ]
    )
    labels = np.array([0, 0, 1, 1, 1])
    fixture = report_from_scores(scores, labels, ("X", "Y"), modality="fusion")
    path = os.path.join(str(tmp_path), "metrics.csv")
    write_metrics_csv({"fusion": fixture}, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    table = {row[0]: row[1:] for row in rows[1:]}
    header = rows[0]
    assert header[:4] == ["class", "fusion_precision", "fusion_recall", "fusion_f1"]
    # hand counts: X: tp=1 fp=1 fn=1 -> P=R=F1=0.5; Y: tp=2 fp=1 fn=1 ->
    # P=2/3, R=2/3, F1=2/3; accuracy 3/5
    assert table["X"] == ["0.500000", "0.500000", "0.500000", "2"]
    assert table["Y"] == ["0.666667", "0.666667", "0.666667", "3"]
    assert table["macro_avg"][0] == "0.583333"
    assert table["accuracy"][0] == "0.600000"


@criterion(10, "same-seed reruns are byte-identical; default run within budget")
def test_criterion_10_end_to_end_determinism(tmp_path):
    config = bundled_config("default.yaml")
    out_a = os.path.join(str(tmp_path), "a")
    out_b = os.path.join(str(tmp_path), "b")
    started = time.monotonic()
    assert main(["run", config, "--out", out_a, "--quiet"]) == 0
    elapsed = time.monotonic() - started
    assert main(["run", config, "--out", out_b, "--quiet"]) == 0
    compared = 0
    for dirpath, _, files in os.walk(os.path.join(out_a, "metrics")):
        for fname in files:
            rel = os.path.relpath(os.path.join(dirpath, fname), out_a)
            with open(os.path.join(out_a, rel), "rb") as fh_a, open(
                os.path.join(out_b, rel), "rb"
            ) as fh_b:
                assert fh_a.read() == fh_b.read(), rel
            compared += 1
    assert compared >= 10
    assert elapsed < 900.0  # 15 min budget for the full default run
