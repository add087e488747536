"""Item catalogs, relation graphs, PPM/PGM images, splits and synthetic data."""
from __future__ import annotations

import json
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IngestionError, SplitError

RELATION_TYPES = ("also_viewed", "buy_after_viewing", "also_bought", "bought_together")
SUBSTITUTES = RELATION_TYPES[:2]
COMPLEMENTS = RELATION_TYPES[2:]


@dataclass(frozen=True)
class Item:
    id: str
    category: str
    image: Path


@dataclass(frozen=True)
class Edge:
    user: str
    src: str
    dst: str
    type: str

    @property
    def pair(self) -> tuple:
        return (self.src, self.dst) if self.src <= self.dst else (self.dst, self.src)


@dataclass
class ItemCatalog:
    items: dict  # id -> Item, in manifest order

    @property
    def categories(self) -> list:
        return sorted({it.category for it in self.items.values()})

    def __len__(self):
        return len(self.items)

    def __contains__(self, item_id):
        return item_id in self.items

    def ids(self) -> list:
        return list(self.items)


@dataclass
class RelationGraph:
    edges: tuple

    def __post_init__(self):
        self.edges = tuple(self.edges)
        self._pairs = {}
        self._pools = {}
        for e in self.edges:
            self._pairs.setdefault((e.user, e.type), set()).add(e.pair)
            pool = self._pools.setdefault(e.user, set())
            pool.add(e.src)
            pool.add(e.dst)

    def __len__(self):
        return len(self.edges)

    @property
    def users(self) -> list:
        return sorted(self._pools)

    def items(self) -> list:
        return sorted({i for e in self.edges for i in (e.src, e.dst)})

    def pairs(self, user: str, rel_type: str) -> set:
        """Unordered item pairs related for ``user`` under ``rel_type``."""
        return self._pairs.get((user, rel_type), set())

    def user_items(self, user: str) -> list:
        """Items the user has at least one relation with, of any type."""
        return sorted(self._pools.get(user, ()))

    def has(self, user: str, i: str, j: str, rel_type: str) -> bool:
        return ((i, j) if i <= j else (j, i)) in self.pairs(user, rel_type)

    def subset(self, indices) -> "RelationGraph":
        return RelationGraph(tuple(self.edges[k] for k in indices))

    def of_type(self, rel_type: str) -> "RelationGraph":
        return RelationGraph(tuple(e for e in self.edges if e.type == rel_type))

    def strata(self) -> dict:
        """(user, type) -> number of edges, in sorted key order."""
        counts = {}
        for e in self.edges:
            counts[(e.user, e.type)] = counts.get((e.user, e.type), 0) + 1
        return dict(sorted(counts.items()))


# -- PPM / PGM ---------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pnm(data: bytes):
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PGM/PPM file (magic {data[:2]!r})", offset=0)
    channels = 1 if data[:2] == b"P5" else 3
    pos, fields = 2, []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if not m or not m.group(1).isdigit():
            raise FormatError("malformed header", offset=pos)
        fields.append(int(m.group(1)))
        pos = m.end()
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad image size {width}x{height}", offset=pos)
    if maxval != 255:
        raise FormatError(f"max value {maxval} unsupported (need 255)", offset=pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header", offset=pos)
    pos += 1
    n = width * height * channels
    if len(data) - pos < n:
        raise FormatError(f"pixel data truncated: need {n} bytes, have {len(data) - pos}", offset=len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return pixels.reshape(height, width, channels).transpose(2, 0, 1)


def read_pnm(path) -> np.ndarray:
    """Raw uint8 pixels as ``[C, H, W]``."""
    return _read_pnm(Path(path).read_bytes())


def encode_pnm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise FormatError(f"cannot encode {c} channels as PGM/PPM")
    magic = b"P5" if c == 1 else b"P6"
    body = np.ascontiguousarray(pixels.transpose(1, 2, 0), dtype=np.uint8).tobytes()
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + body


def write_pnm(path, pixels: np.ndarray) -> None:
    atomic_write(path, encode_pnm(pixels))


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Inverse of the 1/255 scaling done by :func:`decode_image`."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def resize_nearest(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    _, h, w = pixels.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return pixels[:, rows][:, :, cols]


def decode_image(path, channels: int | None = None, size: tuple | None = None) -> np.ndarray:
    """Read a P5/P6 file into a float64 ``[C, H, W]`` tensor in [0, 1].

    ``size`` = (H, W) resizes with nearest-neighbour sampling; ``channels``
    rejects files with a different channel count.
    """
    pixels = read_pnm(path)
    if channels is not None and pixels.shape[0] != channels:
        raise FormatError(f"{path}: expected {channels} channels, file has {pixels.shape[0]}")
    if size is not None and tuple(size) != pixels.shape[1:]:
        pixels = resize_nearest(pixels, *size)
    return pixels.astype(np.float64) / 255.0


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- manifests ---------------------------------------------------------------

def ingest(manifest_path, check_images: bool = True) -> tuple:
    """Parse a JSON Lines manifest into ``(ItemCatalog, RelationGraph)``.

    Item lines are ``{"item", "category", "image"}`` with the image path
    relative to the manifest; edge lines are ``{"user", "src", "dst", "type"}``.
    Edges may reference items declared later in the file.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    items, edges, edge_lines = {}, [], []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise IngestionError("record must be a JSON object", lineno)
            if "item" in rec:
                missing = {"item", "category", "image"} - set(rec)
                if missing:
                    raise IngestionError(f"item record lacks {sorted(missing)}", lineno)
                item_id = str(rec["item"])
                if item_id in items:
                    raise IngestionError(f"duplicate item id {item_id!r}", lineno)
                image = Path(rec["image"])
                if check_images and not (root / image).is_file():
                    raise IngestionError(f"image file {str(image)!r} not found", lineno)
                items[item_id] = Item(item_id, str(rec["category"]), image)
            elif "src" in rec:
                missing = {"user", "src", "dst", "type"} - set(rec)
                if missing:
                    raise IngestionError(f"edge record lacks {sorted(missing)}", lineno)
                if rec["type"] not in RELATION_TYPES:
                    raise IngestionError(
                        f"unknown relation type {rec['type']!r}; expected one of {list(RELATION_TYPES)}",
                        lineno,
                    )
                e = Edge(str(rec["user"]), str(rec["src"]), str(rec["dst"]), rec["type"])
                if e.src == e.dst:
                    raise IngestionError(f"self-edge on item {e.src!r}", lineno)
                edges.append(e)
                edge_lines.append(lineno)
            else:
                raise IngestionError("record is neither an item nor an edge", lineno)
    for e, lineno in zip(edges, edge_lines):
        for end in (e.src, e.dst):
            if end not in items:
                raise IngestionError(f"edge references unknown item {end!r}", lineno)
    return ItemCatalog(items), RelationGraph(tuple(edges))


def manifest_lines(catalog: ItemCatalog, graph: RelationGraph) -> str:
    out = []
    for it in catalog.items.values():
        out.append(json.dumps({"item": it.id, "category": it.category, "image": it.image.as_posix()}))
    for e in graph.edges:
        out.append(json.dumps({"user": e.user, "src": e.src, "dst": e.dst, "type": e.type}))
    return "\n".join(out) + "\n"


def write_manifest(catalog: ItemCatalog, graph: RelationGraph, path) -> None:
    atomic_write(path, manifest_lines(catalog, graph))


def load_images(catalog: ItemCatalog, root, input_shape) -> dict:
    """Decode every catalog image to the configured ``[C, H, W]``."""
    c, h, w = input_shape
    root = Path(root)
    return {
        item_id: decode_image(root / it.image, channels=c, size=(h, w))
        for item_id, it in catalog.items.items()
    }


# -- splits ------------------------------------------------------------------

@dataclass
class SplitSpec:
    train: tuple
    test: tuple
    seed: int
    fraction: float

    def to_dict(self) -> dict:
        return {"seed": self.seed, "fraction": self.fraction,
                "train": list(self.train), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d) -> "SplitSpec":
        return cls(tuple(d["train"]), tuple(d["test"]), d["seed"], d["fraction"])


def make_split(graph: RelationGraph, seed: int, fraction: float = 0.8) -> SplitSpec:
    """Stratified random train/test partition of edge indices.

    Within each relation type, ``floor(n * (1 - fraction))`` edges go to the
    test side and the rest to training.
    """
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must lie in (0, 1), got {fraction}")
    if len(graph) < 2:
        raise SplitError(f"cannot split a graph with {len(graph)} edge(s)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for rel_type in RELATION_TYPES:
        idx = np.array([k for k, e in enumerate(graph.edges) if e.type == rel_type], dtype=np.int64)
        if idx.size == 0:
            continue
        n_test = math.floor(idx.size * (1.0 - fraction) + 1e-9)
        perm = rng.permutation(idx)
        test.extend(int(k) for k in perm[:n_test])
        train.extend(int(k) for k in perm[n_test:])
    return SplitSpec(tuple(sorted(train)), tuple(sorted(test)), seed, fraction)


# -- synthetic data ----------------------------------------------------------

# 6x6 binary motifs; each is distinct under translation
SHAPES = {
    "square": ["######", "#....#", "#....#", "#....#", "#....#", "######"],
    "plus": ["..##..", "..##..", "######", "######", "..##..", "..##.."],
    "cross": ["#....#", ".#..#.", "..##..", "..##..", ".#..#.", "#....#"],
    "hbars": ["######", "......", "######", "......", "######", "......"],
    "vbars": ["#.#.#.", "#.#.#.", "#.#.#.", "#.#.#.", "#.#.#.", "#.#.#."],
    "triangle": ["#.....", "##....", "###...", "####..", "#####.", "######"],
}
SHAPE_NAMES = tuple(SHAPES)
COLORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 1.0, 0.1),
    "blue": (0.1, 0.1, 1.0),
}
COLOR_NAMES = tuple(COLORS)
CATEGORIES = ("sports", "electronics")

# which attribute decides relatedness, per relation type; "focus" defers to the user
RULES = {
    "also_viewed": "motif",
    "buy_after_viewing": "focus",
    "also_bought": "focus",
    "bought_together": "motif",
}


def shape_mask(name: str) -> np.ndarray:
    return np.array([[ch == "#" for ch in row] for row in SHAPES[name]], dtype=bool)


@dataclass
class SyntheticSpec:
    n_items: int = 500
    n_users: int = 3
    image_size: int = 16
    pool_size: int = 150
    noise: float = 0.0
    background: float = 0.1
    seed: int = 0


@dataclass
class UserProfile:
    user: str
    shapes: tuple  # shapes the user engages with
    focus: str  # "shape" or "color"

    def key(self, motif: tuple, rule: str):
        shape, color = motif
        if rule == "motif":
            return motif
        return shape if self.focus == "shape" else color


def user_profiles(n_users: int) -> list:
    """Planted preference profiles: which shapes each user looks at and
    whether they judge relatedness by shape or by colour."""
    n_shapes = len(SHAPE_NAMES)
    out = []
    for u in range(n_users):
        start = (2 * u) % n_shapes
        shapes = tuple(SHAPE_NAMES[(start + k) % n_shapes] for k in range(4))
        out.append(UserProfile(f"u{u}", shapes, "color" if u % 3 == 2 else "shape"))
    return out


def _render(spec: SyntheticSpec, rng, shape: str, color: str):
    s = spec.image_size
    img = rng.uniform(0.0, spec.background, size=(3, s, s))
    mask = shape_mask(shape)
    mh, mw = mask.shape
    r0 = int(rng.integers(1, s - mh))
    c0 = int(rng.integers(1, s - mw))
    full = np.zeros((s, s), dtype=bool)
    full[r0:r0 + mh, c0:c0 + mw] = mask
    img[:, full] = np.asarray(COLORS[color])[:, None]
    return img, full


def generate_synthetic(spec: SyntheticSpec, out_dir) -> tuple:
    """Write a planted-motif dataset to ``out_dir`` and return (catalog, graph).

    Every image carries one coloured shape. For each user and relation type,
    two items of the user's pool are related exactly when the planted rule
    matches; with ``noise > 0`` each edge is independently replaced, with
    that probability, by a pair that violates the rule.
    Files written: ``manifest.jsonl``, ``images/*.ppm``, ``images/*.mask.pgm``
    and ``motifs.json`` (per-item shape, colour and noise bookkeeping).
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    items, motifs = {}, {}
    width = len(str(spec.n_items - 1))
    for k in range(spec.n_items):
        item_id = f"i{k:0{width}d}"
        shape = SHAPE_NAMES[int(rng.integers(len(SHAPE_NAMES)))]
        color = COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
        category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        img, mask = _render(spec, rng, shape, color)
        rel = Path("images") / f"{item_id}.ppm"
        write_pnm(out_dir / rel, to_bytes(img))
        write_pnm(out_dir / "images" / f"{item_id}.mask.pgm", mask.astype(np.uint8)[None] * 255)
        items[item_id] = Item(item_id, category, rel)
        motifs[item_id] = (shape, color)

    profiles = user_profiles(spec.n_users)
    edges, flipped = [], []
    for prof in profiles:
        eligible = [i for i in items if motifs[i][0] in prof.shapes]
        take = min(spec.pool_size, len(eligible))
        pool = sorted(rng.choice(eligible, size=take, replace=False).tolist())
        for rel_type in RELATION_TYPES:
            rule = RULES[rel_type]
            keys = [prof.key(motifs[i], rule) for i in pool]
            matching = [(pool[a], pool[b]) for a in range(len(pool)) for b in range(a + 1, len(pool))
                        if keys[a] == keys[b]]
            nonmatching_needed = spec.noise > 0
            chosen = set(matching)
            for a, b in matching:
                if nonmatching_needed and rng.random() < spec.noise:
                    # swap in a rule-violating pair from the same pool
                    while True:
                        x, y = sorted(rng.choice(pool, size=2, replace=False).tolist())
                        if prof.key(motifs[x], rule) != prof.key(motifs[y], rule) and (x, y) not in chosen:
                            break
                    chosen.add((x, y))
                    edges.append(Edge(prof.user, x, y, rel_type))
                    flipped.append(len(edges) - 1)
                else:
                    edges.append(Edge(prof.user, a, b, rel_type))
    catalog = ItemCatalog(items)
    graph = RelationGraph(tuple(edges))
    write_manifest(catalog, graph, out_dir / "manifest.jsonl")
    info = {
        "spec": spec.__dict__,
        "items": {i: {"shape": s, "color": c} for i, (s, c) in motifs.items()},
        "users": {p.user: {"shapes": list(p.shapes), "focus": p.focus} for p in profiles},
        "rules": RULES,
        "noisy_edges": flipped,
    }
    atomic_write(out_dir / "motifs.json", json.dumps(info, indent=1, sort_keys=True))
    return catalog, graph


def mask_path(image_path: Path) -> Path:
    return image_path.with_name(image_path.name.rsplit(".", 1)[0] + ".mask.pgm")


def load_motif_info(data_dir) -> dict:
    return json.loads((Path(data_dir) / "motifs.json").read_text())
