"""Dataset plumbing: manifests, per-volume standardization, synthetic
phantoms, and stratified fold splitting.

Phantoms stand in for real MRI studies: a noisy background, a centered
brain ellipsoid, and (for non-sham scans) a brighter lesion ellipsoid
confined to the right hemisphere.  They are deliberately simple; what
matters is learnable contrast and a controllable lesion-size distribution
per time point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateVolumeError, FormatError, GenerationError, LabelError
from .nifti import Mask, Volume, read_nifti, write_nifti

TIME_POINTS = ("2h", "24h", "D35")


def derive_seed(base: int, index: int, role: str) -> int:
    """Stable child seed for (run seed, fold/run index, purpose label)."""
    entropy = [int(base), int(index)] + list(role.encode("utf-8"))
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ScanRecord:
    id: str
    volume_path: Path
    mask_path: Path
    study: str
    time_point: str
    sham: bool

    def __post_init__(self) -> None:
        if self.time_point not in TIME_POINTS:
            raise FormatError(f"unknown time point {self.time_point!r}; expected one of {TIME_POINTS}")


@dataclass
class Manifest:
    records: list[ScanRecord]
    source: str = ""

    def __post_init__(self) -> None:
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise FormatError(f"duplicate scan ids in manifest: {dupes}")

    def ids(self) -> list[str]:
        return [r.id for r in self.records]


def load_manifest(path: str | Path) -> Manifest:
    """Parse a tab-separated manifest; paths resolve relative to the file."""
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
        scan_id, vol, mask, study, time_point, sham = (p.strip() for p in parts)
        if sham not in ("0", "1"):
            raise FormatError(f"{path}:{lineno}: sham must be 0 or 1, got {sham!r}")
        records.append(ScanRecord(
            id=scan_id,
            volume_path=(base / vol).resolve(),
            mask_path=(base / mask).resolve(),
            study=study,
            time_point=time_point,
            sham=sham == "1",
        ))
    manifest = Manifest(records=records, source=str(path))
    for r in manifest.records:
        for p in (r.volume_path, r.mask_path):
            if not p.is_file():
                raise FormatError(f"manifest {path} references missing file {p} (scan {r.id})")
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write records with paths relative to the manifest location when possible."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for r in manifest.records:
        paths = []
        for p in (r.volume_path, r.mask_path):
            p = Path(p)
            try:
                paths.append(str(p.resolve().relative_to(base)))
            except ValueError:
                paths.append(str(p))
        lines.append("\t".join([r.id, paths[0], paths[1], r.study, r.time_point,
                                "1" if r.sham else "0"]))
    path.write_text("\n".join(lines) + "\n")


def standardize(v: Volume) -> Volume:
    """Zero-mean, unit-variance rescaling over the whole volume.

    Statistics are per-volume and population-style (divide by N).  A volume
    with (near-)zero spread cannot be standardized.
    """
    values = v.values.astype(np.float64)
    if values.size < 2:
        raise DegenerateVolumeError("standardize needs at least 2 voxels")
    std = float(values.std())
    if std < 1e-12:
        raise DegenerateVolumeError(f"volume standard deviation {std} is degenerate")
    out = (values - values.mean()) / std
    return Volume(values=out.astype(np.float32), voxel_size=v.voxel_size)


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (64, 64, 18)
    noise_std: float = 0.1
    brain_intensity: float = 1.0
    # Lesions brighten over time on T2; D35 sits between the extremes.
    lesion_intensity_factor: Mapping[str, float] = field(
        default_factory=lambda: {"2h": 1.25, "24h": 1.6, "D35": 1.4})
    # In-plane lesion radius bounds (voxels) per time point; 2h lesions are
    # markedly smaller than 24h ones.
    lesion_radius_range: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: {"2h": (3.0, 4.5), "24h": (6.0, 8.0), "D35": (5.0, 7.0)})
    sham_fraction: float = 0.5
    seed: int = 1234

    def __post_init__(self) -> None:
        if any(e < 4 for e in self.shape):
            raise ConfigError(f"phantom shape {self.shape} too small")
        for tp, f in self.lesion_intensity_factor.items():
            if f <= 1.0:
                raise ConfigError(f"lesion_intensity_factor[{tp}] must exceed 1, got {f}")
        if not 0.0 <= self.sham_fraction <= 1.0:
            raise ConfigError(f"sham_fraction must lie in [0, 1], got {self.sham_fraction}")


def _ellipsoid(shape: tuple[int, int, int], center: np.ndarray, semi: np.ndarray) -> np.ndarray:
    ax = [(np.arange(n) - c) / s for n, c, s in zip(shape, center, semi)]
    return (ax[0][:, None, None] ** 2 + ax[1][None, :, None] ** 2
            + ax[2][None, None, :] ** 2) <= 1.0


def generate_phantom(cfg: PhantomConfig, time_point: str, sham: bool,
                     key: int = 0) -> tuple[Volume, Mask]:
    """Build one synthetic scan, deterministic per (cfg.seed, key).

    The brain is a centered ellipsoid with semi-axes 0.42 * shape.  A lesion
    ellipsoid must land entirely inside the brain with every voxel right of
    the x midline; placement is rejection-sampled with a hard attempt cap.
    """
    if time_point not in TIME_POINTS:
        raise ConfigError(f"unknown time point {time_point!r}")
    shape = cfg.shape
    rng = np.random.default_rng([cfg.seed, key])
    noise = rng.normal(0.0, cfg.noise_std, shape)

    dims = np.asarray(shape, dtype=np.float64)
    brain_center = (dims - 1) / 2.0
    brain_semi = 0.42 * dims
    brain = _ellipsoid(shape, brain_center, brain_semi)

    base = np.zeros(shape)
    base[brain] = cfg.brain_intensity
    lesion = np.zeros(shape, dtype=bool)

    if not sham:
        lo, hi = cfg.lesion_radius_range[time_point]
        midline = shape[0] / 2.0
        for _ in range(100):
            r = rng.uniform(lo, hi)
            # Through-plane extent scales with the grid's aspect ratio.
            rz = max(1.0, r * shape[2] / shape[0])
            center = np.array([
                rng.uniform(midline, shape[0] - 1),
                rng.uniform(0, shape[1] - 1),
                rng.uniform(0, shape[2] - 1),
            ])
            candidate = _ellipsoid(shape, center, np.array([r, r, rz]))
            if not candidate.any():
                continue
            if (candidate & ~brain).any():
                continue
            xs = np.nonzero(candidate)[0]
            if xs.min() <= midline:
                continue
            lesion = candidate
            break
        else:
            raise GenerationError(
                f"no valid {time_point} lesion placement in 100 attempts for shape {shape}")
        base[lesion] = cfg.brain_intensity * cfg.lesion_intensity_factor[time_point]

    volume = Volume(values=(base + noise).astype(np.float32))
    mask = Mask(values=lesion.astype(np.uint8))
    return volume, mask


def generate_dataset(cfg: PhantomConfig, out_dir: str | Path, n: int, study: str = "phantom",
                     time_points: Sequence[str] = ("2h", "24h")) -> Manifest:
    """Write n phantom scans plus a manifest into out_dir.

    The first round(n * sham_fraction) scans are shams; time points cycle
    through `time_points` so every (time_point, sham) cell stays balanced.
    """
    if n < 1:
        raise ConfigError(f"need at least one scan, got n={n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_sham = round(n * cfg.sham_fraction)
    records = []
    for i in range(n):
        sham = i < n_sham
        time_point = time_points[i % len(time_points)]
        scan_id = f"{study}_{i:03d}"
        volume, mask = generate_phantom(cfg, time_point, sham, key=i)
        vol_path = out / f"{scan_id}.nii"
        mask_path = out / f"{scan_id}_mask.nii"
        write_nifti(volume, vol_path)
        write_nifti(mask, mask_path)
        records.append(ScanRecord(id=scan_id, volume_path=vol_path.resolve(),
                                  mask_path=mask_path.resolve(), study=study,
                                  time_point=time_point, sham=sham))
    manifest = Manifest(records=records, source=str(out))
    save_manifest(manifest, out / "manifest.tsv")
    return manifest


@dataclass
class Sample:
    """A loaded, standardized scan ready for training or scoring."""

    record: ScanRecord
    volume: Volume
    mask: Mask


def load_samples(manifest: Manifest) -> list[Sample]:
    """Read and standardize every scan; enforce the sham/empty-mask invariant."""
    samples = []
    for r in manifest.records:
        volume = read_nifti(r.volume_path)
        mask = read_nifti(r.mask_path)
        if isinstance(volume, Mask):
            volume = Volume(values=volume.values.astype(np.float32), voxel_size=volume.voxel_size)
        if not isinstance(mask, Mask):
            raise LabelError(f"scan {r.id}: {r.mask_path} is not a binary mask")
        if volume.values.shape != mask.values.shape:
            raise FormatError(f"scan {r.id}: volume {volume.values.shape} vs mask "
                              f"{mask.values.shape} shape mismatch")
        if r.sham and mask.values.any():
            raise LabelError(f"scan {r.id} is sham but its mask has foreground voxels")
        samples.append(Sample(record=r, volume=standardize(volume), mask=mask))
    return samples


def _stratum_key(record: ScanRecord) -> tuple[int, bool]:
    return (TIME_POINTS.index(record.time_point), record.sham)


def _stratified_order(records: Sequence[ScanRecord], seed: int) -> list[ScanRecord]:
    """Records grouped by (time_point, sham) in canonical stratum order,
    shuffled within each stratum by a seeded generator."""
    strata: dict[tuple[int, bool], list[ScanRecord]] = {}
    for r in records:
        strata.setdefault(_stratum_key(r), []).append(r)
    rng = np.random.default_rng(seed)
    ordered = []
    for k in sorted(strata):
        group = strata[k]
        ordered.extend(group[j] for j in rng.permutation(len(group)))
    return ordered


@dataclass
class FoldSplit:
    folds: list[list[str]]  # scan ids; fold f is the test set of run f

    def test_ids(self, fold: int) -> list[str]:
        return self.folds[fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for f, ids in enumerate(self.folds) if f != fold for i in ids]


def split_folds(manifest: Manifest | Sequence[ScanRecord], k: int, seed: int) -> FoldSplit:
    """Deal a stratified shuffle round-robin into k folds.

    A single counter runs across strata, so fold sizes differ by at most one
    even when some stratum is smaller than k.
    """
    records = manifest.records if isinstance(manifest, Manifest) else list(manifest)
    if k < 2:
        raise ConfigError(f"need k >= 2 folds, got {k}")
    if len(records) < k:
        raise ConfigError(f"cannot split {len(records)} records into {k} folds")
    folds: list[list[str]] = [[] for _ in range(k)]
    for counter, r in enumerate(_stratified_order(records, seed)):
        folds[counter % k].append(r.id)
    return FoldSplit(folds=folds)


def split_train_val(records: Sequence[ScanRecord], val_fraction: float,
                    seed: int) -> tuple[list[ScanRecord], list[ScanRecord]]:
    """Stratified train/validation split; validation gets ~val_fraction."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if len(records) < 2:
        raise ConfigError(f"cannot split {len(records)} records into train and validation")
    period = max(2, round(1.0 / val_fraction))
    train, val = [], []
    for counter, r in enumerate(_stratified_order(records, seed)):
        (val if counter % period == 0 else train).append(r)
    return train, val
