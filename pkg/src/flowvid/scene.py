"""Synthetic paired-video world with analytic ground-truth flow.

Scenes are textured backgrounds with rigid shapes (circle, rectangle,
triangle) translating at constant integer velocities under an integer
camera pan. Every frame is a pure function of the scene seed and the
frame index, so the optical flow between consecutive frames is known
exactly: a pixel showing a surface that moved by d pixels carries the
target-to-source flow -d. Integer displacements make the backward warp
an exact gather, which is what lets the flow-consistency invariant be
checked to quantization precision.

Pixel p of frame t shows world point p + t * pan. Shape i sits at world
position center_i + t * velocity_i, so its pixel-space displacement per
frame is velocity_i - pan and the background's is -pan.
"""

from dataclasses import dataclass, replace

import numpy as np

# Class IDs are fixed for the whole package.
BACKGROUND = 0
SHAPE_CLASSES = {"circle": 1, "rectangle": 2, "triangle": 3}
CLASS_NAMES = {0: "background", 1: "circle", 2: "rectangle", 3: "triangle"}
NUM_CLASSES = 4
BACKGROUND_CLASSES = (BACKGROUND,)


@dataclass(frozen=True)
class ShapeSpec:
    """One rigid shape: geometry at t=0 plus its constant velocity."""

    kind: str  # circle | rectangle | triangle
    center: tuple[float, float]  # world (x, y) at t=0
    size: tuple[float, float]  # (width, height) extents in pixels
    color: tuple[float, float, float]  # RGB in [-1, 1]
    velocity: tuple[int, int]  # world pixels/frame, integer

    def __post_init__(self):
        if self.kind not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        vx, vy = self.velocity
        if vx != int(vx) or vy != int(vy):
            raise ValueError("shape velocities must be integer pixels/frame")


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of one synthetic sequence.

    With ``shapes=None`` the shapes are drawn deterministically from
    ``seed``; passing an explicit tuple pins the geometry for analytic
    tests.
    """

    seed: int = 0
    num_frames: int = 12
    height: int = 64
    width: int = 64
    num_shapes: int = 3
    shape_kinds: tuple[str, ...] = ("circle", "rectangle", "triangle")
    max_velocity: int = 3  # per-component bound, pixels/frame
    size_range: tuple[float, float] = (10.0, 22.0)
    camera_pan: tuple[int, int] = (0, 0)
    bg_components: int = 4  # sinusoids per channel in the background texture
    bg_contrast: float = 0.5
    divisor: int = 16  # H and W must be multiples of this
    shapes: tuple[ShapeSpec, ...] | None = None

    def validate(self):
        if self.num_frames < 3:
            raise ValueError(f"num_frames must be >= 3, got {self.num_frames}")
        if self.height % self.divisor or self.width % self.divisor:
            raise ValueError(
                f"dimensions {self.width}x{self.height} must be divisible by "
                f"{self.divisor} (coarsest downsample factor)"
            )
        if self.num_shapes < 1:
            raise ValueError("num_shapes must be >= 1")
        px, py = self.camera_pan
        if px != int(px) or py != int(py):
            raise ValueError("camera pan must be integer pixels/frame")
        for kind in self.shape_kinds:
            if kind not in SHAPE_CLASSES:
                raise ValueError(f"unknown shape kind {kind!r}")


@dataclass
class PairedSequence:
    """A rendered (source, target) pair with ground-truth flow.

    frames hold quantized values: every entry lies on the 8-bit lattice
    v/127.5 - 1, so a disk round-trip is lossless.
    """

    config: SceneConfig
    labels: np.ndarray  # (T, H, W) uint8 class IDs
    instances: np.ndarray  # (T, H, W) uint8 instance IDs, 0 = background
    frames: np.ndarray  # (T, 3, H, W) float32 in [-1, 1]
    flows: np.ndarray  # (T-1, 2, H, W) float32, target-to-source
    valid: np.ndarray  # (T-1, H, W) bool

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def background_masks(self):
        """(T, H, W) float32, 1 where the class is a background class."""
        return np.stack(
            [derive_background_mask(lab, BACKGROUND_CLASSES) for lab in self.labels]
        )

    def equals(self, other):
        return (
            self.config == other.config
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.instances, other.instances)
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.flows, other.flows)
            and np.array_equal(self.valid, other.valid)
        )


def derive_background_mask(label_map, background_classes, num_classes=NUM_CLASSES):
    """Binary mask, 1 exactly where the pixel class is a background class."""
    label_map = np.asarray(label_map)
    if label_map.max(initial=0) >= num_classes:
        bad = int(label_map.max())
        raise ValueError(f"unknown class ID {bad} (have {num_classes} classes)")
    mask = np.zeros(label_map.shape, dtype=np.float32)
    for c in background_classes:
        mask[label_map == c] = 1.0
    return mask


def quantize_frame(img):
    """Snap a float image in [-1, 1] onto the 8-bit storage lattice."""
    u8 = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return u8.astype(np.float32) / 127.5 - 1.0


def _draw_shapes(config, rng):
    shapes = []
    for _ in range(config.num_shapes):
        kind = config.shape_kinds[rng.integers(len(config.shape_kinds))]
        size = tuple(rng.uniform(*config.size_range, size=2))
        margin = max(size) / 2 + 2
        center = (
            rng.uniform(margin, config.width - margin),
            rng.uniform(margin, config.height - margin),
        )
        color = tuple(rng.uniform(-0.9, 0.9, size=3))
        v = config.max_velocity
        velocity = (int(rng.integers(-v, v + 1)), int(rng.integers(-v, v + 1)))
        shapes.append(ShapeSpec(kind, center, size, color, velocity))
    return tuple(shapes)


def _background_texture(config, rng_params, wx, wy):
    """Smooth RGB texture as a function of world coordinates."""
    base, freqs, phases = rng_params
    img = np.empty((3,) + wx.shape, dtype=np.float64)
    for c in range(3):
        acc = np.full(wx.shape, base[c])
        for j in range(config.bg_components):
            fx, fy = freqs[j]
            acc += (config.bg_contrast / config.bg_components) * np.sin(
                2.0 * np.pi * (fx * wx + fy * wy) + phases[j, c]
            )
        img[c] = acc
    return np.clip(img, -1.0, 1.0)


def _bg_params(config, rng):
    base = rng.uniform(-0.4, 0.4, size=3)
    # Wavelengths between ~8 and ~32 px survive a 2x downsample.
    freqs = rng.uniform(1.0 / 32.0, 1.0 / 8.0, size=(config.bg_components, 2))
    freqs *= rng.choice([-1.0, 1.0], size=(config.bg_components, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(config.bg_components, 3))
    return base, freqs, phases


def _shape_mask(shape, wx, wy, t):
    cx = shape.center[0] + t * shape.velocity[0]
    cy = shape.center[1] + t * shape.velocity[1]
    dx, dy = wx - cx, wy - cy
    sx, sy = shape.size
    if shape.kind == "circle":
        r = sx / 2.0
        return dx * dx + dy * dy <= r * r
    if shape.kind == "rectangle":
        return (np.abs(dx) <= sx / 2.0) & (np.abs(dy) <= sy / 2.0)
    # Triangle: apex up, base at the bottom.
    inside_y = (dy >= -sy / 2.0) & (dy <= sy / 2.0)
    half_width = (sx / 2.0) * (dy + sy / 2.0) / sy
    return inside_y & (np.abs(dx) <= half_width)


def render_sequence(config: SceneConfig) -> PairedSequence:
    """Render a full paired sequence; a pure function of the config."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    bg_params = _bg_params(config, rng)
    shapes = config.shapes if config.shapes is not None else _draw_shapes(config, rng)

    T, H, W = config.num_frames, config.height, config.width
    pan = np.array(config.camera_pan)
    ys, xs = np.mgrid[0:H, 0:W]

    labels = np.zeros((T, H, W), dtype=np.uint8)
    instances = np.zeros((T, H, W), dtype=np.uint8)
    frames = np.empty((T, 3, H, W), dtype=np.float32)

    for t in range(T):
        cam = t * pan
        wx, wy = xs + cam[0], ys + cam[1]
        img = _background_texture(config, bg_params, wx, wy)
        lab = np.zeros((H, W), dtype=np.uint8)
        inst = np.zeros((H, W), dtype=np.uint8)
        for i, shape in enumerate(shapes):  # later shapes occlude earlier ones
            m = _shape_mask(shape, wx, wy, t)
            lab[m] = SHAPE_CLASSES[shape.kind]
            inst[m] = i + 1
            for c in range(3):
                img[c][m] = shape.color[c]
        labels[t] = lab
        instances[t] = inst
        frames[t] = quantize_frame(img)

    # Per-instance pixel displacement between consecutive frames.
    disp = np.zeros((len(shapes) + 1, 2), dtype=np.int64)
    disp[0] = -pan
    for i, shape in enumerate(shapes):
        disp[i + 1] = np.array(shape.velocity) - pan

    flows = np.empty((T - 1, 2, H, W), dtype=np.float32)
    valid = np.empty((T - 1, H, W), dtype=bool)
    for t in range(T - 1):
        inst_next = instances[t + 1]
        d = disp[inst_next]  # (H, W, 2), displacement of the visible surface
        flows[t, 0] = -d[..., 0]
        flows[t, 1] = -d[..., 1]
        qx, qy = xs - d[..., 0], ys - d[..., 1]
        in_bounds = (qx >= 0) & (qx < W) & (qy >= 0) & (qy < H)
        qx_c, qy_c = np.clip(qx, 0, W - 1), np.clip(qy, 0, H - 1)
        same_surface = instances[t][qy_c, qx_c] == inst_next
        valid[t] = in_bounds & same_surface

    return PairedSequence(
        config=config,
        labels=labels,
        instances=instances,
        frames=frames,
        flows=flows,
        valid=valid,
    )


def relabel(labels, mapping):
    """Apply a class->class relabeling to a stack of label maps.

    ``mapping`` is a dict of old class ID to new class ID; classes not
    mentioned map to themselves. All IDs must be known classes.
    """
    for old, new in mapping.items():
        if old >= NUM_CLASSES or new >= NUM_CLASSES or old < 0 or new < 0:
            raise ValueError(f"relabel {old}->{new} uses an unknown class ID")
    lut = np.arange(NUM_CLASSES, dtype=np.uint8)
    for old, new in mapping.items():
        lut[old] = new
    labels = np.asarray(labels)
    if labels.max(initial=0) >= NUM_CLASSES:
        raise ValueError(f"unknown class ID {int(labels.max())} in label maps")
    return lut[labels]


def default_scene_configs(base_seed, count, **overrides):
    """Per-sequence configs for a dataset: seeds, pans and shape counts vary."""
    rng = np.random.default_rng(base_seed)
    configs = []
    for i in range(count):
        pan = (int(rng.integers(-1, 2)), int(rng.integers(-1, 2)))
        num_shapes = int(rng.integers(2, 5))
        cfg = SceneConfig(
            seed=int(base_seed * 100003 + i),
            camera_pan=pan,
            num_shapes=num_shapes,
            **overrides,
        )
        configs.append(cfg)
    return configs


def resize_paired_sequence(seq: PairedSequence, factor: float) -> PairedSequence:
    """Downscale a rendered sequence for coarse training phases.

    Labels, instances and validity use nearest sampling so IDs stay
    integral; frames average-pool; flows rescale in both resolution and
    magnitude. Only power-of-two downscales are supported.
    """
    if factor == 1:
        return seq
    step = int(round(1.0 / factor))
    if step * factor != 1.0 or step < 1:
        raise ValueError(f"unsupported resize factor {factor}")
    T, _, H, W = seq.frames.shape
    frames = seq.frames.reshape(T, 3, H // step, step, W // step, step).mean(axis=(3, 5))
    labels = seq.labels[:, ::step, ::step]
    instances = seq.instances[:, ::step, ::step]
    valid = seq.valid[:, ::step, ::step]
    fl = seq.flows.reshape(T - 1, 2, H // step, step, W // step, step).mean(axis=(3, 5))
    flows = (fl * factor).astype(np.float32)
    new_cfg = replace(seq.config, height=H // step, width=W // step, divisor=1)
    return PairedSequence(
        config=new_cfg,
        labels=labels,
        instances=instances,
        frames=frames.astype(np.float32),
        flows=flows,
        valid=valid,
    )
