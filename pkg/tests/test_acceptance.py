"""Acceptance gate: one test per shipped guarantee.

Each test prints a single [PASS]/[FAIL] line that survives pytest's output
capture, then asserts.  Tolerances and budgets are pinned here and nowhere
else.  The two training criteria (overfit fidelity, cross-validation
quality) run real optimization on a single CPU and dominate the wall time
of the suite; everything else finishes in seconds.
"""

import struct
import sys
import time

import numpy as np
import pytest

from ratlesnet.cli import main
from ratlesnet.data import (PhantomConfig, Sample, ScanRecord, generate_dataset,
                            generate_phantom, standardize)
from ratlesnet.metrics import crossval, dice
from ratlesnet.model import (ModelConfig, build_model, forward, param_count,
                             predict_mask)
from ratlesnet.nifti import Mask, Volume, read_nifti, write_nifti
from ratlesnet.ops import (ConvParams, concat_channels, conv3d, maxpool3d, relu,
                           softmax_cross_entropy, unpool3d)
from ratlesnet.tensor import Graph, Tensor, backward, grad_check, tensor_new
from ratlesnet.training import AdamState, TrainConfig, TrainPolicy, adam_step, train


_TERMINAL = None


@pytest.fixture(autouse=True, scope="module")
def _grab_terminal(request):
    # Default fd-level capture swallows prints even on sys.__stdout__; the
    # terminal reporter holds the real stream saved before capture started.
    global _TERMINAL
    _TERMINAL = request.config.pluginmanager.get_plugin("terminalreporter")


def _report(number: int, label: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"[{status}] criterion {number}: {label}"
    if detail:
        line += f" ({detail})"
    if _TERMINAL is None:
        print(line, file=sys.__stdout__, flush=True)
    else:
        _TERMINAL.write_line(line)


# --- criterion 1: gradient correctness -------------------------------------

def _conv_op(x, w, b):
    return conv3d(x, ConvParams(weight=w, bias=b))


def _end_to_end_error(seed: int) -> float:
    """Finite-difference check of d(loss)/d(theta) through a whole tiny model."""
    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig(input_channels=1, num_classes=2, growth_rate=2,
                                    levels=1, seed=seed), dtype=np.float64)
    x = Tensor(rng.normal(0.0, 1.0, size=(1, 1, 6, 6, 4)), requires_grad=True)
    target = rng.integers(0, 2, size=(6, 6, 4))
    tensors = [t for _, t in model.parameters()] + [x]
    model.set_requires_grad(True)
    # Zero-initialized biases put decoder units exactly on the ReLU kink
    # (unpooled inputs are mostly exact zeros), where one-sided derivatives
    # disagree and finite differences measure their average.  Jitter every
    # parameter so the check runs at a generic, differentiable point.
    for t in tensors[:-1]:
        t.data += rng.normal(0.0, 0.05, size=t.data.shape)

    def loss_value() -> float:
        return softmax_cross_entropy(forward(model, x), target).item()

    with Graph() as tape:
        loss = softmax_cross_entropy(forward(model, x), target)
    model.zero_grad()
    x.zero_grad()
    backward(tape, loss)

    h = 1e-6
    worst = 0.0
    measured = 0
    skipped = 0
    for t in tensors:
        flat = t.data.reshape(-1)
        coords = rng.permutation(flat.size)[:min(24, flat.size)]
        for c in coords:
            keep = flat[c]

            def central(step: float) -> float:
                flat[c] = keep + step
                up = loss_value()
                flat[c] = keep - step
                down = loss_value()
                flat[c] = keep
                return (up - down) / (2 * step)

            numeric = central(h)
            coarse = central(2 * h)
            # A ReLU kink or pooling tie inside the stencil makes the loss
            # non-differentiable at this coordinate; finite differences cannot
            # measure it there, so it is excluded rather than mismeasured.
            # Smooth truncation error sits orders of magnitude below this bar.
            if abs(numeric - coarse) / max(1.0, abs(numeric) + abs(coarse)) > 1e-5:
                skipped += 1
                continue
            measured += 1
            analytic = t.grad.reshape(-1)[c]
            err = abs(analytic - numeric) / max(1.0, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    assert skipped <= measured // 20, f"too many kink-straddled coordinates: {skipped}"
    return worst


def test_criterion_01_gradients():
    started = time.monotonic()
    checks = {
        "conv3d_k3": lambda s: grad_check(
            _conv_op, [(1, 2, 4, 4, 3), (3, 2, 3, 3, 3), (1, 3, 1, 1, 1)], seed=s),
        "conv3d_k1": lambda s: grad_check(
            _conv_op, [(2, 3, 2, 2, 2), (4, 3, 1, 1, 1), (1, 4, 1, 1, 1)], seed=s),
        "relu": lambda s: grad_check(relu, [(2, 2, 3, 3, 2)], seed=s),
        "concat_channels": lambda s: grad_check(
            lambda a, b: concat_channels([a, b]),
            [(1, 1, 2, 2, 2), (1, 2, 2, 2, 2)], seed=s),
        "maxpool3d": lambda s: grad_check(
            lambda x: maxpool3d(x)[0], [(1, 1, 4, 4, 4)], seed=s, sampling="distinct"),
        "unpool3d": lambda s: grad_check(
            lambda x: unpool3d(x, _POOL_CTX), [(1, 1, 2, 2, 2)], seed=s),
        "softmax_cross_entropy": lambda s: grad_check(
            lambda logits: softmax_cross_entropy(logits, _XENT_TARGET),
            [(1, 2, 2, 2, 2)], seed=s),
    }
    op_worst = {}
    for name, check in checks.items():
        op_worst[name] = max(check(seed) for seed in range(5))
    model_worst = max(_end_to_end_error(seed) for seed in range(5))
    elapsed = time.monotonic() - started

    ok = all(err < 1e-4 for err in op_worst.values()) and model_worst < 1e-3 \
        and elapsed < 120
    detail = (f"op max err {max(op_worst.values()):.2e}, "
              f"end-to-end max err {model_worst:.2e}, {elapsed:.0f}s")
    _report(1, "gradients match finite differences", ok, detail)
    for name, err in op_worst.items():
        assert err < 1e-4, f"{name}: {err}"
    assert model_worst < 1e-3
    assert elapsed < 120


_POOL_CTX = maxpool3d(tensor_new((1, 1, 4, 4, 4),
                                 np.random.default_rng(0).permutation(64).astype(float)))[1]
_XENT_TARGET = np.random.default_rng(1).integers(0, 2, size=(2, 2, 2))


# --- criterion 2: convolution against a second, naive route ----------------

def _naive_conv3d(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct accumulation over kernel offsets, nothing shared with ops.py."""
    b, ci, sx, sy, sz = x.shape
    co, _, k = w.shape[:3]
    half = k // 2
    out = np.zeros((b, co, sx, sy, sz))
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                for bi in range(b):
                    for oc in range(co):
                        for ic in range(ci):
                            for px in range(sx):
                                qx = px + dx - half
                                if not 0 <= qx < sx:
                                    continue
                                for py in range(sy):
                                    qy = py + dy - half
                                    if not 0 <= qy < sy:
                                        continue
                                    for pz in range(sz):
                                        qz = pz + dz - half
                                        if 0 <= qz < sz:
                                            out[bi, oc, px, py, pz] += (
                                                w[oc, ic, dx, dy, dz] * x[bi, ic, qx, qy, qz])
    return out + bias.reshape(1, co, 1, 1, 1)


def test_criterion_02_conv_oracle():
    rng = np.random.default_rng(202)
    worst = 0.0
    for case in range(20):
        b = int(rng.integers(1, 3))
        ci = int(rng.integers(1, 4))
        co = int(rng.integers(1, 4))
        spatial = tuple(int(rng.integers(1, 9)) for _ in range(3))
        k = 3 if case % 4 else 1
        x = rng.normal(size=(b, ci) + spatial)
        w = rng.normal(size=(co, ci, k, k, k))
        bias = rng.normal(size=(1, co, 1, 1, 1))
        got = conv3d(Tensor(x), ConvParams(weight=Tensor(w), bias=Tensor(bias))).data
        worst = max(worst, float(np.max(np.abs(got - _naive_conv3d(x, w, bias)))))
    ok = worst < 1e-5
    _report(2, "conv3d agrees with the nested-loop route", ok, f"max |diff| {worst:.2e}")
    assert ok


# --- criterion 3: parameter budget ------------------------------------------

def test_criterion_03_param_budget():
    count = param_count(build_model(ModelConfig()))
    ok = count == 270_980 and 200_000 <= count <= 500_000
    _report(3, "default model holds 270,980 parameters", ok, f"counted {count}")
    assert count == 270_980
    assert 200_000 <= count <= 500_000


# --- criterion 4: full-resolution forward pass ------------------------------

def test_criterion_04_full_volume_forward():
    model = build_model(ModelConfig())
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(0.0, 1.0, size=(1, 1, 256, 256, 18)).astype(np.float32))

    started = time.monotonic()
    out = forward(model, x)
    elapsed = time.monotonic() - started

    # The downsampling arithmetic the model relies on: 18 -> 9 -> 4 -> 9 -> 18.
    probe = tensor_new((1, 1, 256, 256, 18), 0.0)
    p1, c1 = maxpool3d(probe)
    p2, c2 = maxpool3d(p1)
    depths = [probe.shape[4], p1.shape[4], p2.shape[4]]
    u1 = unpool3d(p2, c2)
    u2 = unpool3d(u1, c1)
    depths += [u1.shape[4], u2.shape[4]]

    ok = out.shape == (1, 2, 256, 256, 18) and depths == [18, 9, 4, 9, 18] \
        and elapsed < 60
    _report(4, "256x256x18 volume segments in one pass", ok,
            f"shape {out.shape}, depth chain {depths}, {elapsed:.1f}s")
    assert out.shape == (1, 2, 256, 256, 18)
    assert depths == [18, 9, 4, 9, 18]
    assert elapsed < 60


# --- criterion 5: overfit fidelity -------------------------------------------

def test_criterion_05_overfit_four_scans():
    started = time.monotonic()
    cfg = PhantomConfig(
        noise_std=0.01,
        lesion_intensity_factor={"2h": 1.4, "24h": 3.0, "D35": 1.7},
        lesion_radius_range={"2h": (4.0, 6.0), "24h": (9.0, 11.0), "D35": (5.0, 7.0)},
        seed=23,
    )
    volumes, labels = [], []
    for key in range(4):
        volume, mask = generate_phantom(cfg, "24h", sham=False, key=key)
        volumes.append(standardize(volume))
        labels.append(mask.values)
    inputs = [Tensor(v.values.astype(np.float32)[None, None]) for v in volumes]

    model = build_model(ModelConfig())
    params = [t for _, t in model.parameters()]
    model.set_requires_grad(True)
    # beta2 below its default shortens the moment-estimate horizon, which
    # speeds up the escape from the all-background argmax plateau here.
    adam = AdamState(lr=1e-3, beta2=0.99)

    def training_set_dice() -> float:
        scores = [dice(predict_mask(model, v), Mask(values=m))
                  for v, m in zip(volumes, labels)]
        return float(np.mean(scores))

    # Dice read off each step's own logits is free and gates the expensive
    # fixed-parameter verification pass: every other epoch once the rough
    # signal clears 0.88, every epoch once it clears 0.94.
    rng = np.random.default_rng(11)
    achieved = 0.0
    epochs_used = 0
    for epoch in range(1, 301):
        in_loop = []
        for idx in rng.permutation(len(inputs)):
            with Graph() as tape:
                logits = forward(model, inputs[idx])
                loss = softmax_cross_entropy(logits, labels[idx])
            model.zero_grad()
            backward(tape, loss)
            adam_step(params, [p.grad for p in params], adam)
            predicted = logits.data.argmax(axis=1)[0].astype(np.uint8)
            in_loop.append(dice(Mask(values=predicted), Mask(values=labels[idx])))
        epochs_used = epoch
        rough = float(np.mean(in_loop))
        if rough >= 0.94 or (rough >= 0.88 and epoch % 2 == 1):
            achieved = training_set_dice()
            if achieved >= 0.95:
                break
        if time.monotonic() - started > 575:
            achieved = max(achieved, training_set_dice())
            break

    elapsed = time.monotonic() - started
    ok = achieved >= 0.95 and epochs_used <= 300 and elapsed < 600
    _report(5, "four scans overfit to Dice >= 0.95", ok,
            f"dice {achieved:.4f} after {epochs_used} epochs, {elapsed:.0f}s")
    assert achieved >= 0.95
    assert epochs_used <= 300
    assert elapsed < 600


# --- criterion 6: cross-validation quality -----------------------------------

def test_criterion_06_crossval_quality(tmp_path):
    started = time.monotonic()
    # Reduced phantom size keeps five folds tractable on one CPU; composition
    # stays 24 sham / 12 early / 12 late.
    cfg = PhantomConfig(
        shape=(28, 28, 14),
        noise_std=0.03,
        lesion_intensity_factor={"2h": 2.0, "24h": 2.5, "D35": 1.7},
        lesion_radius_range={"2h": (2.8, 3.4), "24h": (3.6, 4.2), "D35": (3.2, 3.8)},
        sham_fraction=0.5,
        seed=1234,
    )
    manifest = generate_dataset(cfg, tmp_path / "scans", n=48)
    records = manifest.records
    composition = {
        "sham": sum(r.sham for r in records),
        "2h": sum(r.time_point == "2h" and not r.sham for r in records),
        "24h": sum(r.time_point == "24h" and not r.sham for r in records),
    }
    assert composition == {"sham": 24, "2h": 12, "24h": 12}

    train_config = TrainConfig(lr=1e-3, max_epochs=40, patience=5, val_fraction=0.2)
    result = crossval(manifest, k=5, model_config=ModelConfig(),
                      train_config=train_config, seed=0, threads=1)
    scored = {s.scan_id for s in result.report.results}
    lesioned = result.report.row("Average", shams_included=False)
    everyone = result.report.row("Average", shams_included=True)
    elapsed = time.monotonic() - started

    ok = scored == set(manifest.ids()) and lesioned.mean_dice >= 0.7 \
        and everyone.mean_dice > lesioned.mean_dice and elapsed < 7200
    _report(6, "5-fold crossval reaches Dice >= 0.7 without shams", ok,
            f"lesioned {lesioned.mean_dice:.4f}, with shams {everyone.mean_dice:.4f}, "
            f"{elapsed:.0f}s")
    assert scored == set(manifest.ids())
    assert lesioned.mean_dice >= 0.7
    assert everyone.mean_dice > lesioned.mean_dice
    assert elapsed < 7200


# --- criterion 7: early stopping ---------------------------------------------

def test_criterion_07_early_stopping(monkeypatch):
    trace = [5.0, 4.0, 3.0, 3.1, 3.2, 3.3, 3.4, 3.5]
    calls = iter(trace)
    monkeypatch.setattr("ratlesnet.training.mean_validation_loss",
                        lambda model, val_set: next(calls))

    rng = np.random.default_rng(7)
    shape = (6, 6, 4)
    values = rng.normal(1.0, 0.1, size=shape).astype(np.float32)
    mask = np.zeros(shape, dtype=np.uint8)
    mask[:3, :3, :] = 1
    values[mask == 1] += 2.0
    record = ScanRecord(id="a", volume_path="a.nii", mask_path="a_m.nii",
                        study="gate", time_point="24h", sham=False)
    sample = Sample(record=record, volume=standardize(Volume(values=values)),
                    mask=Mask(values=mask))

    model = build_model(ModelConfig(input_channels=1, num_classes=2, growth_rate=2,
                                    levels=1, seed=7))
    snapshots = {}

    def keep_snapshot(epoch, m, train_loss, val_loss):
        snapshots[epoch] = [p.data.copy() for _, p in m.parameters()]
        return False

    result = train(model, [sample], [sample],
                   policy=TrainPolicy(max_epochs=50, patience=5),
                   adam=AdamState(lr=1e-3), seed=7, epoch_callback=keep_snapshot)

    restored = [p.data for _, p in model.parameters()]
    bit_exact = all(np.array_equal(a, b) for a, b in zip(restored, snapshots[3]))
    ok = result.epochs_run == 8 and result.best_epoch == 3 and bit_exact
    _report(7, "rising validation loss stops training and restores the best epoch",
            ok, f"ran {result.epochs_run}, kept epoch {result.best_epoch}")
    assert result.epochs_run == 8
    assert result.best_epoch == 3
    assert bit_exact


# --- criterion 8: storage format round trip ----------------------------------

def _mini_nifti(raw: np.ndarray, order: str) -> bytes:
    """Minimal single-file stream assembled with struct, not the library."""
    codes = {np.dtype(np.float32): (16, 32), np.dtype(np.uint8): (2, 8)}
    datatype, bitpix = codes[raw.dtype]
    header = bytearray(352)
    struct.pack_into(order + "i", header, 0, 348)
    struct.pack_into(order + "8h", header, 40, 3, *raw.shape, 1, 1, 1, 1)
    struct.pack_into(order + "2h", header, 70, datatype, bitpix)
    struct.pack_into(order + "8f", header, 76, 1.0, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(order + "3f", header, 108, 352.0, 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    body = raw.astype(raw.dtype.newbyteorder(order), copy=False).tobytes(order="F")
    return bytes(header) + body


def test_criterion_08_nifti_round_trip():
    rng = np.random.default_rng(8)
    volume = Volume(values=rng.normal(size=(5, 4, 3)).astype(np.float32),
                    voxel_size=(0.5, 0.5, 0.5))
    mask = Mask(values=rng.integers(0, 2, size=(5, 4, 3)).astype(np.uint8))

    volume_back = read_nifti(write_nifti(volume))
    mask_back = read_nifti(write_nifti(mask))
    exact = (np.array_equal(volume_back.values, volume.values)
             and volume_back.values.dtype == np.float32
             and np.array_equal(mask_back.values, mask.values)
             and isinstance(mask_back, Mask))

    little = read_nifti(_mini_nifti(volume.values, "<"))
    big = read_nifti(_mini_nifti(volume.values, ">"))
    orders_agree = (np.array_equal(little.values, big.values)
                    and np.array_equal(little.values, volume.values))

    blob = write_nifti(volume)
    header = blob[:352]
    constants = (
        struct.unpack_from("<i", header, 0)[0] == 348
        and header[344:348] == b"n+1\x00"
        and struct.unpack_from("<2h", header, 70) == (16, 32)
        and struct.unpack_from("<3f", header, 108) == (352.0, 1.0, 0.0)
        and len(blob) == 352 + volume.values.size * 4
    )
    mask_header = write_nifti(mask)[:352]
    constants = constants and struct.unpack_from("<2h", mask_header, 70) == (2, 8)

    ok = exact and orders_agree and constants
    _report(8, "storage round trip is voxel-exact in both byte orders", ok)
    assert exact
    assert orders_agree
    assert constants


# --- criterion 9: overlap scoring --------------------------------------------

def test_criterion_09_dice_suite():
    rng = np.random.default_rng(9)
    shape = (6, 5, 4)
    some = Mask(values=rng.integers(0, 2, size=shape).astype(np.uint8))
    empty = Mask(values=np.zeros(shape, dtype=np.uint8))

    a = np.zeros(shape, dtype=np.uint8)
    b = np.zeros(shape, dtype=np.uint8)
    a.reshape(-1)[:4] = 1
    b.reshape(-1)[1:7] = 1  # overlap of 3 voxels

    disjoint = np.zeros(shape, dtype=np.uint8)
    disjoint.reshape(-1)[10:14] = 1

    exact = (dice(some, some) == 1.0
             and dice(Mask(values=a), Mask(values=disjoint)) == 0.0
             and dice(Mask(values=a), Mask(values=b)) == pytest.approx(0.6, abs=1e-12)
             and dice(empty, empty) == 1.0)

    symmetric = True
    for _ in range(100):
        left = Mask(values=rng.integers(0, 2, size=shape).astype(np.uint8))
        right = Mask(values=rng.integers(0, 2, size=shape).astype(np.uint8))
        if dice(left, right) != dice(right, left):
            symmetric = False
            break

    ok = exact and symmetric
    _report(9, "Dice handles identity, disjoint, partial, and empty cases", ok)
    assert exact
    assert symmetric


# --- criterion 10: reproducibility -------------------------------------------

_REPRO_CONFIG = """\
model.growth_rate=2
model.levels=1
train.lr=1e-3
train.max_epochs=2
train.patience=5
train.val_fraction=0.25
data.shape=16,16,8
data.noise_std=0.05
data.radius.2h=1.5,2
data.radius.24h=2,2.8
data.radius.D35=1.8,2.4
eval.k=3
"""


def test_criterion_10_deterministic_crossval(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(_REPRO_CONFIG)
    data_dir = tmp_path / "scans"
    assert main(["generate", "--config", str(cfg), "--out", str(data_dir),
                 "--n", "8"]) == 0
    manifest = str(data_dir / "manifest.tsv")

    outputs = []
    for run in ("first", "second"):
        out = tmp_path / run
        rc = main(["crossval", "--config", str(cfg), "--manifest", manifest,
                   "--out", str(out), "--threads", "1", "--seed", "0"])
        assert rc == 0
        outputs.append(out)

    compared = ["report.csv", "audit.tsv"] + [f"fold_{i}.ckpt" for i in range(3)]
    mismatched = [name for name in compared
                  if (outputs[0] / name).read_bytes() != (outputs[1] / name).read_bytes()]
    ok = not mismatched
    _report(10, "repeated crossval runs are byte-identical", ok,
            f"compared {len(compared)} artifacts")
    assert not mismatched, mismatched
