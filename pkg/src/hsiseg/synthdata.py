"""Deterministic phantom benchmark with three nested structures and per-stage domain shift.

Label map: 0 background, 1 core (ellipse), 2 ring (annulus around the core),
3 halo (star-shaped blob containing both). Priority 1 > 2 > 3 makes the
per-pixel label unique. Stage ``t`` brings structure ``t + 1`` imaged under
domain ``t``.

Seeds: every sample gets its own seed from
``splitmix64((splitmix64(master) + (stream << 32) + index) mod 2**64)``.
splitmix64 is a bijection on 64-bit integers, so distinct (stream, index)
pairs never share a seed. Streams: ``3t`` train of stage t, ``3t + 1`` val
of stage t, ``3d + 2`` test subset of domain d.

On-disk format (``write_benchmark``): one ``<split>.npz`` archive per split
(``images`` little-endian float32 [N, H, W], ``masks`` uint8 [N, H, W],
``domain_ids`` int64 [N], ``seeds`` uint64 [N]; every member is a ``.npy``
array with its own dtype/shape header) plus a human-readable
``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MASK64 = (1 << 64) - 1
LABEL_NAMES = {0: "background", 1: "core", 2: "ring", 3: "halo"}
BENCHMARK_VERSION = 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def sample_seed(master: int, stream: int, index: int) -> int:
    if not 0 <= index < 1 << 32:
        raise ValueError("sample index out of range")
    return splitmix64((splitmix64(master & MASK64) + (stream << 32) + index) & MASK64)


def train_stream(t: int) -> int:
    return 3 * t


def val_stream(t: int) -> int:
    return 3 * t + 1


def test_stream(d: int) -> int:
    return 3 * d + 2


@dataclass
class PhantomSpec:
    size: int = 64
    center_jitter: float = 6.0
    core_axes: tuple[float, float] = (4.0, 8.0)
    ring_thickness: tuple[float, float] = (2.0, 4.0)
    halo_offset: float = 2.0
    halo_margin: tuple[float, float] = (3.0, 7.0)
    halo_amplitude: float = 0.35
    head_axes: tuple[float, float] = (26.0, 30.0)
    intensity: dict = field(default_factory=lambda: {
        "outside": 0.05, "tissue": 0.35, "halo": 0.55, "ring": 0.85, "core": 0.15,
    })
    min_pixels: int = 20
    max_retries: int = 50


@dataclass
class DomainSpec:
    domain_id: int
    gamma: float = 1.0
    contrast: float = 1.0
    noise: float = 0.0
    bias: float = 0.0
    invert: bool = False

    def validate(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.contrast <= 2:
            raise ValueError("contrast must lie in (0, 2]")
        if not 0 <= self.noise <= 0.5:
            raise ValueError("noise sigma must lie in [0, 0.5]")
        if not 0 <= self.bias < 1:
            raise ValueError("bias amplitude must lie in [0, 1)")


def default_domains() -> list[DomainSpec]:
    """Escalating shift: mild, gamma + noise, inversion + bias field."""
    return [
        DomainSpec(0, gamma=1.0, contrast=1.0, noise=0.03, bias=0.0),
        DomainSpec(1, gamma=0.5, contrast=0.9, noise=0.08, bias=0.1),
        DomainSpec(2, gamma=1.2, contrast=0.9, noise=0.05, bias=0.3, invert=True),
    ]


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    domain_id: int
    full_mask: bool


def _ellipse(yy, xx, cy, cx, ay, ax, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Clean float32 image and full uint8 mask for one seed."""
    rng = np.random.default_rng([seed, 0])
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    mid = n / 2
    for _ in range(spec.max_retries):
        cy, cx = mid + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
        a1, a2 = sorted(rng.uniform(*spec.core_axes, size=2))
        theta = rng.uniform(0, math.pi)
        thick = rng.uniform(*spec.ring_thickness)
        off = rng.uniform(0, spec.halo_offset, size=2)
        hy, hx = cy + off[0], cx + off[1]
        r0 = math.hypot(*off) + a2 + thick + rng.uniform(*spec.halo_margin)
        k = np.arange(2, 5)
        coef = rng.uniform(0, 1, size=3)
        coef /= coef.sum()
        phase = rng.uniform(0, 2 * math.pi, size=3)

        core = _ellipse(yy, xx, cy, cx, a1, a2, theta)
        ring = _ellipse(yy, xx, cy, cx, a1 + thick, a2 + thick, theta) & ~core
        ang = np.arctan2(yy - hy, xx - hx)
        harm = (coef[:, None, None] * np.cos(k[:, None, None] * ang + phase[:, None, None])).sum(0)
        radius = r0 * (1 + spec.halo_amplitude * 0.5 * (1 + harm))
        halo = (np.hypot(yy - hy, xx - hx) <= radius) & ~core & ~ring
        r_max = r0 * (1 + spec.halo_amplitude)
        inside = min(hy, hx) - r_max >= 1 and max(hy, hx) + r_max <= n - 1
        big_enough = min(core.sum(), ring.sum(), halo.sum()) >= spec.min_pixels
        if inside and big_enough:
            break
    else:
        raise RuntimeError(f"could not draw a valid phantom for seed {seed} in {spec.max_retries} tries")

    head_ay, head_ax = rng.uniform(*spec.head_axes, size=2)
    head = _ellipse(yy, xx, mid, mid, head_ay, head_ax, 0.0)
    lv = spec.intensity
    image = np.full((n, n), lv["outside"])
    image[head] = lv["tissue"]
    image[halo] = lv["halo"]
    image[ring] = lv["ring"]
    image[core] = lv["core"]
    mask = np.zeros((n, n), dtype=np.uint8)
    mask[halo] = 3
    mask[ring] = 2
    mask[core] = 1
    return image.astype(np.float32), mask


def _bias_field(n: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] / n
    fy, fx = rng.uniform(0.3, 1.0, size=2) * rng.choice([-1, 1], size=2)
    phase = rng.uniform(0, 2 * math.pi)
    return np.cos(2 * math.pi * (fy * yy + fx * xx) + phase)


def apply_domain(image: np.ndarray, domain: DomainSpec, seed: int) -> np.ndarray:
    """clip(bias * (contrast * image**gamma + noise), 0, 1); inversion first if flagged."""
    domain.validate()
    rng = np.random.default_rng([seed, 1])
    x = image.astype(np.float64)
    if domain.invert:
        x = 1.0 - x
    x = domain.contrast * np.power(np.clip(x, 0, 1), domain.gamma)
    if domain.noise > 0:
        x = x + rng.normal(0.0, domain.noise, size=x.shape)
    if domain.bias > 0:
        x = x * (1.0 + domain.bias * _bias_field(x.shape[0], rng))
    return np.clip(x, 0.0, 1.0).astype(np.float32)


@dataclass
class Dataset:
    images: np.ndarray  # float32 [N, H, W]
    masks: np.ndarray  # uint8 [N, H, W]
    domain_ids: np.ndarray  # int64 [N]
    seeds: np.ndarray  # uint64 [N]
    full_mask: bool
    name: str = ""

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.masks[i], int(self.domain_ids[i]), self.full_mask)

    def categories(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.masks))

    def subset(self, domain_id: int) -> "Dataset":
        keep = self.domain_ids == domain_id
        return Dataset(self.images[keep], self.masks[keep], self.domain_ids[keep], self.seeds[keep],
                       self.full_mask, f"{self.name}[d{domain_id}]")


def concat(datasets: list[Dataset], name: str = "") -> Dataset:
    return Dataset(
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.masks for d in datasets]),
        np.concatenate([d.domain_ids for d in datasets]),
        np.concatenate([d.seeds for d in datasets]),
        all(d.full_mask for d in datasets),
        name,
    )


def _render(seeds, domain: DomainSpec, spec: PhantomSpec, keep: int | None, name: str) -> Dataset:
    images, masks = [], []
    for s in seeds:
        img, mask = generate_phantom(spec, int(s))
        images.append(apply_domain(img, domain, int(s)))
        masks.append(mask if keep is None else np.where(mask == keep, mask, 0).astype(np.uint8))
    n = len(seeds)
    return Dataset(
        np.stack(images) if n else np.zeros((0, spec.size, spec.size), np.float32),
        np.stack(masks) if n else np.zeros((0, spec.size, spec.size), np.uint8),
        np.full(n, domain.domain_id, dtype=np.int64),
        np.asarray(seeds, dtype=np.uint64),
        keep is None,
        name,
    )


def make_stage_dataset(t: int, n: int, seed: int, split: str = "train", spec: PhantomSpec | None = None,
                       domains: list[DomainSpec] | None = None, full_mask: bool = False) -> Dataset:
    """Stage-t split in domain t. Masks keep only structure t+1 unless ``full_mask``."""
    domains = domains or default_domains()
    spec = spec or PhantomSpec()
    if not 0 <= t < len(domains):
        raise ValueError(f"stage {t} outside 0..{len(domains) - 1}")
    if n <= 0:
        raise ValueError("dataset size must be positive")
    stream = {"train": train_stream(t), "val": val_stream(t)}[split]
    seeds = [sample_seed(seed, stream, i) for i in range(n)]
    return _render(seeds, domains[t], spec, None if full_mask else t + 1, f"{split}{t}")


def make_test_set(n: int, seed: int, spec: PhantomSpec | None = None,
                  domains: list[DomainSpec] | None = None) -> Dataset:
    domains = domains or default_domains()
    spec = spec or PhantomSpec()
    parts = [_render([sample_seed(seed, test_stream(d.domain_id), i) for i in range(n)], d, spec, None,
                     f"test[d{d.domain_id}]") for d in domains]
    return concat(parts, "test")


@dataclass
class BenchmarkConfig:
    master_seed: int = 0
    n_train: int = 200
    n_val: int = 40
    n_test: int = 80
    num_stages: int = 3
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    domains: list[DomainSpec] = field(default_factory=default_domains)

    def describe(self) -> dict:
        return {
            "version": BENCHMARK_VERSION,
            "master_seed": self.master_seed,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "num_stages": self.num_stages,
            "phantom": asdict(self.phantom),
            "domains": [asdict(d) for d in self.domains],
        }

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode()).hexdigest()


@dataclass
class Benchmark:
    train: list[Dataset]
    val: list[Dataset]
    test: Dataset
    config_hash: str = ""

    def full_train(self, config: BenchmarkConfig) -> list[Dataset]:
        """Stage training sets again, with every structure labelled (for the joint upper bound)."""
        return [make_stage_dataset(t, len(self.train[t]), config.master_seed, "train", config.phantom,
                                   config.domains, full_mask=True) for t in range(len(self.train))]


def make_benchmark(config: BenchmarkConfig) -> Benchmark:
    if config.num_stages > len(config.domains):
        raise ValueError("need one domain per stage")
    doms = config.domains[:config.num_stages]
    train = [make_stage_dataset(t, config.n_train, config.master_seed, "train", config.phantom, doms)
             for t in range(config.num_stages)]
    val = [make_stage_dataset(t, config.n_val, config.master_seed, "val", config.phantom, doms)
           for t in range(config.num_stages)]
    test = make_test_set(config.n_test, config.master_seed, config.phantom, doms)
    return Benchmark(train, val, test, config.hash())


def save_dataset(ds: Dataset, path) -> str:
    path = Path(path)
    np.savez(path, images=ds.images.astype("<f4"), masks=ds.masks.astype("u1"),
             domain_ids=ds.domain_ids.astype("<i8"), seeds=ds.seeds.astype("<u8"),
             full_mask=np.array(ds.full_mask))
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_dataset(path, name: str = "") -> Dataset:
    with np.load(Path(path), allow_pickle=False) as z:
        return Dataset(z["images"], z["masks"], z["domain_ids"], z["seeds"], bool(z["full_mask"]),
                       name or Path(path).stem)


def write_benchmark(config: BenchmarkConfig, out_dir) -> tuple[Path, bool]:
    """Write every split plus manifest.json. Returns (manifest path, written?).

    Nothing is rewritten when an existing manifest already carries this
    config's hash.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    digest = config.hash()
    if manifest_path.exists():
        try:
            old = json.loads(manifest_path.read_text())
        except json.JSONDecodeError:
            old = {}
        if old.get("hash") == digest and all((out / s["file"]).exists() for s in old.get("splits", {}).values()):
            return manifest_path, False
    bench = make_benchmark(config)
    splits = {}
    for t, ds in enumerate(bench.train):
        splits[f"train{t}"] = ds
    for t, ds in enumerate(bench.val):
        splits[f"val{t}"] = ds
    splits["test"] = bench.test
    entries = {}
    for name, ds in splits.items():
        sha = save_dataset(ds, out / f"{name}.npz")
        entries[name] = {"file": f"{name}.npz", "n": len(ds), "full_mask": ds.full_mask, "sha256": sha}
    manifest = {
        "hash": digest,
        "generator": config.describe(),
        "label_map": {str(k): v for k, v in LABEL_NAMES.items()},
        "image_size": config.phantom.size,
        "layout": "npz of .npy arrays: images <f4 [N,H,W], masks u1 [N,H,W], domain_ids <i8, seeds <u8",
        "splits": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path, True


def read_benchmark(data_dir) -> Benchmark:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    manifest = json.loads(manifest_path.read_text())
    n_stages = manifest["generator"]["num_stages"]
    train = [load_dataset(data_dir / f"train{t}.npz") for t in range(n_stages)]
    val = [load_dataset(data_dir / f"val{t}.npz") for t in range(n_stages)]
    return Benchmark(train, val, load_dataset(data_dir / "test.npz"), manifest["hash"])


def export_png(ds: Dataset, path, count: int = 16) -> Path:
    """Montage of the first ``count`` images (top) and masks (bottom) for eyeballing."""
    from PIL import Image

    count = min(count, len(ds))
    imgs = np.concatenate(list(ds.images[:count]), axis=1)
    masks = np.concatenate(list(ds.masks[:count]), axis=1).astype(np.float32) / 3.0
    tile = (np.clip(np.concatenate([imgs, masks], axis=0), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(tile).save(path)
    return Path(path)
