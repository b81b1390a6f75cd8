"""File formats, preprocessing, and synthetic dataset generation.

Binary layouts are little-endian and deliberately trivial to parse from any
language. The dataset manifest records enough ground truth (scene
parameters plus per-image noise seed keys) to regenerate every image
bit-for-bit.
"""

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .asc_model import (AscParams, RadarGrid, SpatialGrid, SignalMatrix,
                        signal_to_image, synthesize_signal)
from .solvers import AmpConfig, IstaConfig
from .unfolded import TrainConfig

_IMG_MAGIC = b"ASCIMAGE"
_IMG_VERSION = 1
_IMG_HEADER_FMT = "<8sIII"

MANIFEST_VERSION = 1
CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Malformed or unknown-key experiment configuration."""


# ---------------------------------------------------------------------------
# complex image files
# ---------------------------------------------------------------------------

def write_complex_image(path, img: np.ndarray) -> None:
    """Header (magic, version, H, W) + row-major interleaved re/im float64."""
    img = np.asarray(img, dtype=np.complex128)
    if img.ndim != 2:
        raise ValueError("expected a 2-D complex image")
    h, w = img.shape
    payload = np.empty((h, w, 2), dtype="<f8")
    payload[:, :, 0] = img.real
    payload[:, :, 1] = img.imag
    with open(path, "wb") as fh:
        fh.write(struct.pack(_IMG_HEADER_FMT, _IMG_MAGIC, _IMG_VERSION, h, w))
        payload.tofile(fh)


def read_complex_image(path) -> np.ndarray:
    header_size = struct.calcsize(_IMG_HEADER_FMT)
    with open(path, "rb") as fh:
        header = fh.read(header_size)
        if len(header) != header_size:
            raise ValueError(f"{path}: truncated image header")
        magic, version, h, w = struct.unpack(_IMG_HEADER_FMT, header)
        if magic != _IMG_MAGIC:
            raise ValueError(f"{path}: not a complex image file")
        if version != _IMG_VERSION:
            raise ValueError(f"{path}: unsupported image version {version}")
        if h < 1 or w < 1:
            raise ValueError(f"{path}: bad dimensions {h}x{w}")
        payload = np.fromfile(fh, dtype="<f8")
    if payload.size != 2 * h * w:
        raise ValueError(f"{path}: payload size {payload.size} does not match {h}x{w}")
    payload = payload.reshape(h, w, 2)
    return payload[:, :, 0] + 1j * payload[:, :, 1]


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def preprocess(img: np.ndarray, crop: int) -> np.ndarray:
    """Center crop to crop x crop, then scale to unit L2 norm.

    The crop window is floor-biased: for H x W input the retained rows are
    (H - crop)//2 .. (H - crop)//2 + crop - 1, and likewise for columns.
    """
    img = np.asarray(img, dtype=np.complex128)
    h, w = img.shape
    if crop < 1 or crop > min(h, w):
        raise ValueError(f"crop {crop} exceeds image dims {h}x{w}")
    r0 = (h - crop) // 2
    c0 = (w - crop) // 2
    out = img[r0:r0 + crop, c0:c0 + crop]
    norm = np.linalg.norm(out)
    if norm == 0:
        raise ValueError("zero-energy image cannot be normalized")
    return out / norm


# ---------------------------------------------------------------------------
# scene files
# ---------------------------------------------------------------------------

def write_scene(path, scene: Sequence[AscParams]) -> None:
    """One text record per scatterer: A_re A_im alpha x y."""
    with open(path, "w") as fh:
        fh.write("# A_re A_im alpha x y\n")
        for sc in scene:
            fh.write(f"{sc.amplitude.real!r} {sc.amplitude.imag!r} "
                     f"{sc.alpha!r} {sc.x!r} {sc.y!r}\n")


def read_scene(path) -> List[AscParams]:
    scene = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            a_re, a_im, alpha, x, y = map(float, parts)
            scene.append(AscParams(complex(a_re, a_im), alpha, x, y))
    return scene


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

@dataclass
class SceneDistribution:
    """Random-scene recipe: scatterer count range, amplitudes, placement."""

    k_min: int = 1
    k_max: int = 4
    amp_min: float = 0.5
    amp_max: float = 2.0
    on_grid: bool = True
    jitter_frac: float = 0.0   # cell fraction of position jitter when off-grid
    noise_sigma: float = 0.0
    alpha_values: Tuple[float, ...] = (0.0,)
    edge_margin: int = 1       # keep scatterers this many cells off the border

    def __post_init__(self):
        if not 0 <= self.k_min <= self.k_max:
            raise ValueError("need 0 <= k_min <= k_max")
        if self.amp_min <= 0 or self.amp_max < self.amp_min:
            raise ValueError("need 0 < amp_min <= amp_max")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def shifted(self) -> "SceneDistribution":
        """Harder companion split: more scatterers and more noise."""
        return replace(self, k_min=self.k_min + 2, k_max=self.k_max + 2,
                       noise_sigma=self.noise_sigma + 0.02)


def draw_scene(dist: SceneDistribution, spatial: SpatialGrid,
               rng: np.random.Generator) -> List[AscParams]:
    """Sample one scene; on-grid scenes occupy distinct interior cells."""
    k = int(rng.integers(dist.k_min, dist.k_max + 1))
    m = dist.edge_margin
    xs = spatial.x[m:spatial.n_x - m] if spatial.n_x > 2 * m else spatial.x
    ys = spatial.y[m:spatial.n_y - m] if spatial.n_y > 2 * m else spatial.y
    n_cells = len(xs) * len(ys)
    cells = rng.choice(n_cells, size=min(k, n_cells), replace=False)
    scene = []
    for cell in cells:
        x = xs[cell // len(ys)]
        y = ys[cell % len(ys)]
        if not dist.on_grid and dist.jitter_frac > 0:
            x += float(rng.uniform(-dist.jitter_frac, dist.jitter_frac)) * spatial.dx
            y += float(rng.uniform(-dist.jitter_frac, dist.jitter_frac)) * spatial.dy
        amp = float(rng.uniform(dist.amp_min, dist.amp_max))
        phase = float(rng.uniform(0.0, 2 * np.pi))
        alpha = float(rng.choice(np.asarray(dist.alpha_values)))
        scene.append(AscParams(amp * np.exp(1j * phase), alpha, float(x), float(y)))
    return scene


def _scene_to_records(scene: Sequence[AscParams]) -> List[Dict]:
    return [{"a_re": sc.amplitude.real, "a_im": sc.amplitude.imag,
             "alpha": sc.alpha, "x": sc.x, "y": sc.y} for sc in scene]


def _records_to_scene(records: Sequence[Dict]) -> List[AscParams]:
    return [AscParams(complex(r["a_re"], r["a_im"]), r["alpha"], r["x"], r["y"])
            for r in records]


def _render_scene(scene: Sequence[AscParams], radar: RadarGrid,
                  noise_sigma: float, noise_key: Sequence[int]) -> np.ndarray:
    sig = synthesize_signal(scene, radar, noise_sigma,
                            rng=np.random.default_rng(np.random.SeedSequence(list(noise_key))))
    return signal_to_image(sig)


def synthesize_dataset(dist: SceneDistribution, n_train: int, n_val: int, n_test: int,
                       radar: RadarGrid, spatial: SpatialGrid, seed: int, out_dir,
                       shifted: Optional[SceneDistribution] = None) -> Dict:
    """Write train/val/test image files plus a ground-truth manifest.

    Train and val are drawn from ``dist``; the test split uses the shifted
    distribution (``dist.shifted()`` unless given) so held-out evaluation
    sees a different scatterer-count range and noise level. Scene draws and
    noise use separate seed streams derived from (seed, split, index), so
    any image can be regenerated from its manifest entry alone.
    """
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ValueError(f"{name} must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shifted = shifted if shifted is not None else dist.shifted()

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "radar": {"f_center": radar.f_center, "bandwidth": radar.bandwidth,
                  "synth_angle": radar.synth_angle, "n_freq": radar.n_freq,
                  "n_aspect": radar.n_aspect},
        "spatial": {"n_x": spatial.n_x, "n_y": spatial.n_y, "x0": spatial.x0,
                    "dx": spatial.dx, "y0": spatial.y0, "dy": spatial.dy},
        "splits": {},
    }
    split_specs = [("train", 0, n_train, dist), ("val", 1, n_val, dist),
                   ("test", 2, n_test, shifted)]
    for split, split_id, count, split_dist in split_specs:
        (out_dir / split).mkdir(exist_ok=True)
        images = []
        for i in range(count):
            scene_rng = np.random.default_rng(np.random.SeedSequence([seed, split_id, i, 0]))
            noise_key = [seed, split_id, i, 1]
            scene = draw_scene(split_dist, spatial, scene_rng)
            img = _render_scene(scene, radar, split_dist.noise_sigma, noise_key)
            rel = f"{split}/{i:05d}.cimg"
            write_complex_image(out_dir / rel, img)
            images.append({"file": rel, "noise_sigma": split_dist.noise_sigma,
                           "noise_key": noise_key, "scene": _scene_to_records(scene)})
        manifest["splits"][split] = {"distribution": asdict(split_dist), "images": images}

    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(dataset_dir) -> Dict:
    with open(Path(dataset_dir) / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


def manifest_grids(manifest: Dict) -> Tuple[RadarGrid, SpatialGrid]:
    r = manifest["radar"]
    s = manifest["spatial"]
    return (RadarGrid(r["f_center"], r["bandwidth"], r["synth_angle"],
                      r["n_freq"], r["n_aspect"]),
            SpatialGrid(s["n_x"], s["n_y"], s["x0"], s["dx"], s["y0"], s["dy"]))


def load_split(dataset_dir, split: str) -> List[np.ndarray]:
    """Images of one split, in manifest order."""
    base = Path(dataset_dir)
    manifest = load_manifest(base)
    return [read_complex_image(base / entry["file"])
            for entry in manifest["splits"][split]["images"]]


def split_scenes(manifest: Dict, split: str) -> List[List[AscParams]]:
    return [_records_to_scene(entry["scene"])
            for entry in manifest["splits"][split]["images"]]


def regenerate_image(manifest: Dict, split: str, index: int) -> np.ndarray:
    """Recompute one image from manifest ground truth alone."""
    radar, _ = manifest_grids(manifest)
    entry = manifest["splits"][split]["images"][index]
    scene = _records_to_scene(entry["scene"])
    return _render_scene(scene, radar, entry["noise_sigma"], entry["noise_key"])


# ---------------------------------------------------------------------------
# raster export
# ---------------------------------------------------------------------------

def export_magnitude_image(img: np.ndarray, path, db: bool = False,
                           db_floor: float = -40.0) -> None:
    """8-bit grayscale PGM of |img|, linear by default or dB with a floor."""
    img = np.asarray(img)
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    mag = np.abs(img)
    peak = float(mag.max())
    if peak == 0:
        pixels = np.zeros(mag.shape, dtype=np.uint8)
    elif db:
        level = 20.0 * np.log10(np.maximum(mag / peak, 10 ** (db_floor / 20.0)))
        pixels = np.round((level - db_floor) * (255.0 / -db_floor)).astype(np.uint8)
    else:
        pixels = np.round(mag * (255.0 / peak)).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    out_dir: str = "dataset"
    distribution: SceneDistribution = field(default_factory=SceneDistribution)


@dataclass
class ExperimentConfig:
    """Everything a run needs; parsed strictly (unknown keys are errors)."""

    radar: RadarGrid = field(default_factory=RadarGrid)
    n_x: int = 16
    n_y: int = 16
    aligned: bool = True
    x_extent: Optional[float] = None
    y_extent: Optional[float] = None
    ista: IstaConfig = field(default_factory=lambda: IstaConfig(0.01, 0.005, 100))
    omp_sparsity: int = 40
    amp: AmpConfig = field(default_factory=AmpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_stages: int = 4
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    seed: int = 0

    def spatial_grid(self) -> SpatialGrid:
        if self.aligned:
            if (self.n_x, self.n_y) != (self.radar.n_freq, self.radar.n_aspect):
                raise ConfigError("aligned spatial grid requires n_x = n_freq and n_y = n_aspect")
            return SpatialGrid.aligned_to(self.radar)
        if self.x_extent is None or self.y_extent is None:
            raise ConfigError("non-aligned grids need x_extent and y_extent")
        return SpatialGrid.centered(self.n_x, self.n_y, self.x_extent, self.y_extent)


def _check_keys(section: Dict, allowed, where: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def config_from_dict(raw: Dict) -> ExperimentConfig:
    _check_keys(raw, {"version", "seed", "radar", "spatial", "ista", "omp",
                      "amp", "train", "dataset"}, "config")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}")
    cfg = ExperimentConfig()
    cfg.seed = int(raw.get("seed", 0))

    radar = raw.get("radar", {})
    _check_keys(radar, {"f_center", "bandwidth", "synth_angle", "n_freq", "n_aspect"},
                "config.radar")
    cfg.radar = RadarGrid(**{**{"f_center": cfg.radar.f_center,
                                "bandwidth": cfg.radar.bandwidth,
                                "synth_angle": cfg.radar.synth_angle,
                                "n_freq": cfg.radar.n_freq,
                                "n_aspect": cfg.radar.n_aspect}, **radar})

    spatial = raw.get("spatial", {})
    _check_keys(spatial, {"n_x", "n_y", "aligned", "x_extent", "y_extent"}, "config.spatial")
    cfg.n_x = int(spatial.get("n_x", cfg.radar.n_freq))
    cfg.n_y = int(spatial.get("n_y", cfg.radar.n_aspect))
    cfg.aligned = bool(spatial.get("aligned", True))
    cfg.x_extent = spatial.get("x_extent")
    cfg.y_extent = spatial.get("y_extent")

    ista = raw.get("ista", {})
    _check_keys(ista, {"step", "thresh", "max_iters", "stop_tol"}, "config.ista")
    cfg.ista = IstaConfig(ista.get("step", 0.01), ista.get("thresh", 0.005),
                          int(ista.get("max_iters", 100)), ista.get("stop_tol", 0.0))

    omp = raw.get("omp", {})
    _check_keys(omp, {"sparsity"}, "config.omp")
    cfg.omp_sparsity = int(omp.get("sparsity", 40))

    amp = raw.get("amp", {})
    _check_keys(amp, {"damping", "max_iters", "threshold_scale", "stop_tol"}, "config.amp")
    cfg.amp = AmpConfig(**amp)

    train = raw.get("train", {})
    _check_keys(train, {"lam", "epochs", "batch_size", "peak_lr", "weight_decay",
                        "warmup_frac", "div_factor", "final_div_factor",
                        "beta1", "beta2", "eps", "seed", "decay_thresh",
                        "squared_residual", "n_stages"}, "config.train")
    train = dict(train)
    cfg.n_stages = int(train.pop("n_stages", 4))
    cfg.train = TrainConfig(**train)

    dataset = raw.get("dataset", {})
    _check_keys(dataset, {"n_train", "n_val", "n_test", "out_dir", "distribution"},
                "config.dataset")
    dist_raw = dataset.get("distribution", {})
    _check_keys(dist_raw, {"k_min", "k_max", "amp_min", "amp_max", "on_grid",
                           "jitter_frac", "noise_sigma", "alpha_values", "edge_margin"},
                "config.dataset.distribution")
    if "alpha_values" in dist_raw:
        dist_raw = {**dist_raw, "alpha_values": tuple(dist_raw["alpha_values"])}
    cfg.dataset = DatasetConfig(
        n_train=int(dataset.get("n_train", 200)),
        n_val=int(dataset.get("n_val", 40)),
        n_test=int(dataset.get("n_test", 40)),
        out_dir=dataset.get("out_dir", "dataset"),
        distribution=SceneDistribution(**dist_raw),
    )
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(raw)
