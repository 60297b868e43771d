"""Synthetic two-site knee-joint images, manifests, splits and augmentation.

The generator draws a stylised joint: two bright bone bands separated by a
dark joint space whose width shrinks with grade. Grades 2+ grow lateral
osteophytes and every grade adds a little subchondral sclerosis near the
joint line. Each site then applies its own acquisition nuisance (blur,
contrast, intensity offset, noise), which is what the drift-correction
experiments have to undo.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from scipy.ndimage import gaussian_filter

from swinkoa import kernels
from swinkoa.config import NUM_GRADES
from swinkoa.seeding import stream

log = logging.getLogger(__name__)

SITES = ("source", "target")
SPLITS = ("train", "val", "test")

# soft tissue sits well above the zero fill used by geometric augmentation,
# so padded borders never look like joint space
BACKGROUND = 0.3
BONE_CONTRAST = 0.5


class ManifestError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    grade: int
    site: str
    split: str | None = None
    id: str = ""
    gap_mask: np.ndarray | None = None  # (H, W) bool joint region, synthetic only


# ---------------------------------------------------------------------------
# specification
# ---------------------------------------------------------------------------


@dataclass
class SiteSpec:
    intensity_offset: float = 0.0
    contrast_scale: float = 1.0
    noise_sigma: float = 0.02
    blur_radius: float = 0.0
    split_ratio: tuple[int, int, int] = (6, 1, 3)
    train_counts: tuple[int, ...] = (400, 160, 170, 180, 90)


def _default_sites() -> dict[str, SiteSpec]:
    return {
        "source": SiteSpec(),
        "target": SiteSpec(
            intensity_offset=0.06,
            contrast_scale=0.8,
            noise_sigma=0.06,
            blur_radius=0.0,
            split_ratio=(7, 1, 2),
        ),
    }


@dataclass
class SynthSpec:
    image_size: int = 64
    gap_widths: tuple[float, ...] = (12.0, 9.5, 7.0, 4.5, 2.0)
    gap_jitter: float = 1.0
    osteophytes: tuple[int, ...] = (0, 0, 1, 2, 4)
    sclerosis: tuple[float, ...] = (0.0, 0.03, 0.06, 0.1, 0.15)
    joint_center_range: tuple[float, float] = (0.3, 0.7)
    mask_margin: int = 4
    seed: int = 0
    sites: dict[str, SiteSpec] = field(default_factory=_default_sites)

    def validate(self) -> list[str]:
        errs = []
        for name in ("gap_widths", "osteophytes", "sclerosis"):
            if len(getattr(self, name)) != NUM_GRADES:
                errs.append(f"{name} needs {NUM_GRADES} entries")
        g = list(self.gap_widths)
        if any(b >= a for a, b in zip(g[:-1], g[1:])):
            errs.append("gap_widths must be strictly decreasing in grade")
        if g and min(g) - self.gap_jitter <= 0:
            errs.append("smallest gap minus jitter must stay positive")
        for name, site in self.sites.items():
            if name not in SITES:
                errs.append(f"unknown site {name!r}; expected one of {SITES}")
            if len(site.split_ratio) != 3 or any(r <= 0 for r in site.split_ratio):
                errs.append(f"site {name}: split_ratio needs three positive parts")
            if len(site.train_counts) != NUM_GRADES or any(c < 0 for c in site.train_counts):
                errs.append(f"site {name}: train_counts needs {NUM_GRADES} non-negative entries")
        return errs

    def counts(self, site: str) -> list[int]:
        """Total samples per grade so the train share matches ``train_counts``."""
        s = self.sites[site]
        total = sum(s.split_ratio)
        return [int(round(c * total / s.split_ratio[0])) for c in s.train_counts]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("gap_widths", "osteophytes", "sclerosis", "joint_center_range"):
            d[k] = list(d[k])
        for site in d["sites"].values():
            site["split_ratio"] = list(site["split_ratio"])
            site["train_counts"] = list(site["train_counts"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown synth spec keys: {unknown}")
        sites = _default_sites()
        for name, sd in (d.pop("sites", None) or {}).items():
            base = sites.get(name, SiteSpec())
            sd = dict(sd)
            for k in ("split_ratio", "train_counts"):
                if k in sd:
                    sd[k] = tuple(sd[k])
            sites[name] = replace(base, **sd)
        for k in ("gap_widths", "osteophytes", "sclerosis", "joint_center_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(sites=sites, **d)


# desk-scale benchmark: the source grade imbalance at roughly a third of the size
BENCHMARK_TRAIN_COUNTS = (120, 48, 51, 54, 27)


def benchmark_spec(seed: int) -> SynthSpec:
    """The fixed two-site benchmark used by the acceptance runs."""
    spec = SynthSpec(seed=seed)
    for site in spec.sites.values():
        site.train_counts = BENCHMARK_TRAIN_COUNTS
    return spec


def load_synth_spec(path) -> SynthSpec:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    spec = SynthSpec.from_dict(data)
    errs = spec.validate()
    if errs:
        raise ValueError("invalid synth spec:\n  " + "\n  ".join(errs))
    return spec


def save_synth_spec(spec: SynthSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(spec.to_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


@dataclass
class JointGeometry:
    center: float
    gap: float
    curvature: float
    x0: float
    x1: float


def _geometry(grade: int, rng: np.random.Generator, spec: SynthSpec) -> JointGeometry:
    n = spec.image_size
    lo, hi = spec.joint_center_range
    return JointGeometry(
        center=rng.uniform(lo, hi) * n,
        gap=spec.gap_widths[grade] + rng.uniform(-spec.gap_jitter, spec.gap_jitter),
        curvature=rng.uniform(0.0, 2.0) * n / 64,
        x0=rng.uniform(0.10, 0.16) * n,
        x1=rng.uniform(0.84, 0.90) * n,
    )


def render_clean(grade: int, seed: int, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, JointGeometry]:
    """Grayscale joint image (H, W) before site effects, its joint mask, and geometry."""
    rng = stream(seed, "synth-geometry", grade)
    n = spec.image_size
    geo = _geometry(grade, rng, spec)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    yc = yy + 0.5
    xc = xx + 0.5
    u = (xc - n / 2) / (n / 2)
    bend = geo.curvature * u * u
    top = geo.center - geo.gap / 2 + bend
    bottom = geo.center + geo.gap / 2 + bend
    cols = np.clip(xc - geo.x0 + 0.5, 0, 1) * np.clip(geo.x1 - xc + 0.5, 0, 1)
    femur = np.clip(top - yc + 0.5, 0, 1) * cols
    tibia = np.clip(yc - bottom + 0.5, 0, 1) * cols
    bone = femur + tibia

    texture = gaussian_filter(rng.standard_normal((n, n)), 2.0) * 0.15
    dist = np.minimum(np.abs(yc - top), np.abs(yc - bottom))
    sclerosis = spec.sclerosis[grade] * np.exp(-dist / 3.0)
    img = BACKGROUND + bone * (BONE_CONTRAST + texture + sclerosis)

    corners = [(geo.x0, top, -1, -1), (geo.x1, top, 1, -1), (geo.x0, bottom, -1, 1), (geo.x1, bottom, 1, 1)]
    order = rng.permutation(4)
    for k in range(spec.osteophytes[grade]):
        cx, edge, sx, sy = corners[order[k % 4]]
        length = (2.0 + grade + rng.uniform(0, 1.5)) * n / 64
        col = cx + sx * length / 2
        row_edge = edge[:, int(np.clip(col, 0, n - 1))].mean()
        row = row_edge + sy * (1.0 + 1.5 * (k // 4))
        blob = ((xc - col) / (length / 2)) ** 2 + ((yc - row) / 1.6) ** 2
        img = np.maximum(img, np.where(blob < 1.0, BACKGROUND + BONE_CONTRAST, 0.0))

    margin = spec.mask_margin
    in_cols = (xc >= geo.x0) & (xc <= geo.x1)
    mask = in_cols & (yc >= top - margin) & (yc <= bottom + margin)
    return np.clip(img, 0.0, 1.0), mask, geo


def apply_site(img: np.ndarray, site: SiteSpec, rng: np.random.Generator) -> np.ndarray:
    out = gaussian_filter(img, site.blur_radius) if site.blur_radius > 0 else img.copy()
    m = out.mean()
    out = site.contrast_scale * out + (1.0 - site.contrast_scale) * m + site.intensity_offset
    if site.noise_sigma > 0:
        out = out + rng.normal(0.0, site.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def synth_sample(grade: int, site: str, seed: int, spec: SynthSpec | None = None) -> Sample:
    """One deterministic synthetic sample for ``(grade, site, seed)``."""
    spec = spec or SynthSpec()
    if not 0 <= grade < NUM_GRADES:
        raise ValueError(f"grade must be in 0..{NUM_GRADES - 1}, got {grade}")
    if site not in spec.sites:
        raise ValueError(f"unknown site {site!r}")
    clean, mask, _ = render_clean(grade, seed, spec)
    noisy = apply_site(clean, spec.sites[site], stream(seed, "synth-site-" + site, grade))
    image = np.repeat(noisy[:, :, None], 3, axis=2).astype(np.float32)
    return Sample(image=image, grade=grade, site=site, id=f"{site}-g{grade}-s{seed}", gap_mask=mask)


def measure_gap(clean: np.ndarray, band: int = 4) -> float:
    """Joint-space width read off the central columns of a clean image.

    Counts rows darker than halfway between background and bone around the
    darkest row; partial rows count fractionally.
    """
    n = clean.shape[0]
    prof = clean[:, n // 2 - band:n // 2 + band].mean(axis=1)
    lo_val, hi_val = BACKGROUND, BACKGROUND + BONE_CONTRAST
    frac = np.clip((hi_val - prof) / (hi_val - lo_val), 0.0, 1.0)
    mid = int(np.argmax(frac[n // 8: n - n // 8])) + n // 8
    i, j = mid, mid
    while i > 0 and frac[i - 1] > 0.05:
        i -= 1
    while j < n - 1 and frac[j + 1] > 0.05:
        j += 1
    return float(frac[i:j + 1].sum())


def generate_dataset(spec: SynthSpec) -> list[Sample]:
    """All samples for every site, split per site ratio."""
    errs = spec.validate()
    if errs:
        raise ValueError("invalid synth spec:\n  " + "\n  ".join(errs))
    out: list[Sample] = []
    for s_idx, site in enumerate(SITES):
        if site not in spec.sites:
            continue
        samples = []
        for grade, count in enumerate(spec.counts(site)):
            for k in range(count):
                seed = int(stream(spec.seed, "synth-sample", s_idx, grade, k).integers(2**62))
                smp = synth_sample(grade, site, seed, spec)
                smp.id = f"{site}-g{grade}-{k:05d}"
                samples.append(smp)
        out.extend(split_dataset(samples, spec.sites[site].split_ratio, seed=spec.seed + s_idx))
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _apportion(n: int, ratio) -> np.ndarray:
    """Largest-remainder allocation of ``n`` items to parts of ``ratio``."""
    r = np.asarray(ratio, dtype=np.float64)
    exact = n * r / r.sum()
    base = np.floor(exact).astype(int)
    rem = n - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rem]] += 1
    return base


def split_counts(grade_counts, ratio) -> np.ndarray:
    """(grade x split) cell counts within one of the exact share, with split totals apportioned globally."""
    grade_counts = np.asarray(grade_counts, dtype=int)
    r = np.asarray(ratio, dtype=np.float64)
    exact = grade_counts[:, None] * r[None, :] / r.sum()
    cells = np.floor(exact).astype(int)
    col_need = _apportion(int(grade_counts.sum()), ratio) - cells.sum(axis=0)
    row_need = grade_counts - cells.sum(axis=1)
    frac = exact - cells
    for flat in np.argsort(-frac, axis=None, kind="stable"):
        g, k = np.unravel_index(flat, frac.shape)
        if frac[g, k] > 0 and row_need[g] > 0 and col_need[k] > 0:
            cells[g, k] += 1
            row_need[g] -= 1
            col_need[k] -= 1
    if row_need.any():  # greedy hit a dead end; relax split totals to floor/ceil
        return _round_cells(exact)
    return cells


def _round_cells(exact: np.ndarray) -> np.ndarray:
    """Round every cell to floor or ceil with exact row sums and column sums
    within one of their exact totals. The constraints form a bipartite
    incidence matrix, so the LP optimum is integral."""
    from scipy.optimize import linprog

    base = np.floor(exact).astype(int)
    frac = exact - base
    row_need = np.rint(exact.sum(axis=1)).astype(int) - base.sum(axis=1)
    col = exact.sum(axis=0)
    col_lo = np.floor(col + 1e-9).astype(int) - base.sum(axis=0)
    col_hi = np.ceil(col - 1e-9).astype(int) - base.sum(axis=0)
    n_g, n_k = exact.shape
    a_eq = np.kron(np.eye(n_g), np.ones(n_k))
    a_col = np.kron(np.ones(n_g), np.eye(n_k))
    res = linprog(-frac.ravel(), A_ub=np.vstack([a_col, -a_col]), b_ub=np.concatenate([col_hi, -col_lo]),
                  A_eq=a_eq, b_eq=row_need, bounds=[(0, float(f > 1e-12)) for f in frac.ravel()], method="highs")
    if not res.success:
        raise RuntimeError(f"split rounding failed: {res.message}")
    return base + np.rint(res.x).astype(int).reshape(n_g, n_k)


def split_dataset(samples: list[Sample], ratio=(6, 1, 3), seed: int = 0) -> list[Sample]:
    """Stratified per-grade split into train/val/test; tags ``split`` in place.

    Returns the samples ordered train, val, test.
    """
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ValueError(f"split ratio needs three positive parts, got {ratio}")
    by_grade = [[s for s in samples if s.grade == g] for g in range(NUM_GRADES)]
    for g, group in enumerate(by_grade):
        if not group:
            log.warning("grade %d has no samples; its split cells stay empty", g)
    cells = split_counts([len(gr) for gr in by_grade], ratio)
    rng = np.random.default_rng(seed)
    out = {name: [] for name in SPLITS}
    for g, group in enumerate(by_grade):
        perm = rng.permutation(len(group))
        start = 0
        for k, name in enumerate(SPLITS):
            for idx in perm[start:start + cells[g, k]]:
                group[idx].split = name
                out[name].append(group[idx])
            start += cells[g, k]
    return out["train"] + out["val"] + out["test"]


def select(samples, site=None, split=None) -> list[Sample]:
    sites = {site} if isinstance(site, str) else set(site) if site else None
    return [s for s in samples if (sites is None or s.site in sites) and (split is None or s.split == split)]


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]).astype(np.float32), np.array([s.grade for s in samples])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentParams:
    angle: float = 0.0  # degrees
    tx: float = 0.0  # fraction of width
    ty: float = 0.0
    scale: float = 1.0
    flip: bool = False
    contrast: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator, max_angle=15.0, max_shift=0.1, scale_range=(0.9, 1.1), contrast=0.3):
        return cls(
            angle=float(rng.uniform(-max_angle, max_angle)),
            tx=float(rng.uniform(-max_shift, max_shift)),
            ty=float(rng.uniform(-max_shift, max_shift)),
            scale=float(rng.uniform(*scale_range)),
            flip=bool(rng.random() < 0.5),
            contrast=float(rng.uniform(1.0 - contrast, 1.0 + contrast)),
        )


def apply_augment(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    """Flip, then rotate/scale/translate about the centre (bilinear, zero fill), then contrast."""
    img = image[:, ::-1] if p.flip else image
    h, w = img.shape[:2]
    if p.angle != 0.0 or p.scale != 1.0 or p.tx != 0.0 or p.ty != 0.0:
        th = math.radians(p.angle)
        c, s = math.cos(th), math.sin(th)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        # inverse map: output pixel -> source coordinate
        dy = yy - cy - p.ty * h
        dx = xx - cx - p.tx * w
        src_y = (c * dy - s * dx) / p.scale + cy
        src_x = (s * dy + c * dx) / p.scale + cx
        img = kernels.bilinear_sample(np.ascontiguousarray(img), src_y, src_x)
    if p.contrast != 1.0:
        m = img.mean()
        img = p.contrast * img + (1.0 - p.contrast) * m
    return np.clip(img, 0.0, 1.0).astype(image.dtype, copy=False)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    params = AugmentParams.draw(rng)
    return replace(sample, image=apply_augment(sample.image, params), gap_mask=None)


# ---------------------------------------------------------------------------
# manifests and image files
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["path", "grade", "site", "split"]


@dataclass(frozen=True)
class ManifestRow:
    path: str
    grade: int
    site: str
    split: str


def write_manifest(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for r in rows:
            wr.writerow([r.path, r.grade, r.site, r.split])


def load_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
            p, g, site, split = (x.strip() for x in rec)
            try:
                grade = int(g)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: grade {g!r} is not an integer") from None
            if not 0 <= grade < NUM_GRADES:
                raise ManifestError(f"{path}:{lineno}: grade {grade} outside 0..{NUM_GRADES - 1}")
            if site not in SITES:
                raise ManifestError(f"{path}:{lineno}: site {site!r} not in {SITES}")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split {split!r} not in {SPLITS}")
            if p in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {p}")
            seen.add(p)
            rows.append(ManifestRow(p, grade, site, split))
    return rows


def load_image(path, image_size: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB") if "A" in im.mode or im.mode == "P" else im.convert("L")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise ManifestError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.ascontiguousarray(arr)


def load_images(rows, image_size: int, root=None) -> list[Sample]:
    """Decode manifest rows; relative paths resolve against ``root``."""
    out = []
    for r in rows:
        p = Path(r.path)
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        out.append(Sample(load_image(p, image_size), r.grade, r.site, r.split, id=r.path))
    return out


def load_dataset(manifest_path, image_size: int) -> list[Sample]:
    rows = load_manifest(manifest_path)
    return load_images(rows, image_size, root=Path(manifest_path).parent)


def write_dataset(samples, out_dir) -> Path:
    """Save samples as 8-bit grayscale PNGs plus ``manifest.csv``; returns the manifest path."""
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        rel = os.path.join("images", f"{s.id}.png")
        gray = np.clip(np.rint(s.image[:, :, 0] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(gray, mode="L").save(out_dir / rel)
        rows.append(ManifestRow(rel, s.grade, s.site, s.split or "train"))
    manifest = out_dir / "manifest.csv"
    write_manifest(rows, manifest)
    return manifest
