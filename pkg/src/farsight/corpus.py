"""Corpus plumbing: sample records, ontology harmonization with auditing,
prompt composition, image normalization, metadata binning, CSV round-trip."""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CorpusError
from .imageio import read_ppm
from .ontology import (ATTRIBUTE_CLASSES, IGNORE_INDEX, NEUTRAL_PROMPT,
                       SEVEN_ATTRIBUTES, UNKNOWN, default_prompt_rows)

# CLIP-style channel statistics used for input normalization
CLIP_MEAN = np.array([0.4815, 0.4578, 0.4082])
CLIP_STD = np.array([0.2686, 0.2613, 0.2758])

CSV_COLUMNS = ["path", "gender", "hairstyle", "upper", "lower", "feet", "accessories",
               "beard", "moustache", "prompt", "identity", "split", "distance_m",
               "height_m", "angle_deg", "source"]

SPLITS = ("train", "val", "test")

# left-open, right-closed bin edges for distance (oblique views) and height (nadir)
DISTANCE_EDGES = (20.0, 40.0, 80.0)
HEIGHT_EDGES = (20.0, 40.0, 80.0)


@dataclass
class SampleRecord:
    gender: int
    attributes: dict[str, int]
    prompt: str
    identity: str
    split: str
    source: str = "synthetic"
    path: str | None = None
    pixels: np.ndarray | None = None          # uint8 [H,W,3]
    distance_m: float | None = None
    height_m: float | None = None
    angle_deg: int | None = None


class PromptVocabulary:
    """Expanded description per (attribute, class index), plus a neutral prompt."""

    def __init__(self, rows: list[tuple[str, int, str]], neutral: str = NEUTRAL_PROMPT):
        self.by_key: dict[tuple[str, int], str] = {}
        for attr, idx, desc in rows:
            key = (attr, int(idx))
            if key in self.by_key:
                raise CorpusError(f"duplicate vocabulary row for {key}")
            self.by_key[key] = desc
        self.neutral = neutral

    @classmethod
    def default(cls) -> "PromptVocabulary":
        return cls(default_prompt_rows())

    @classmethod
    def from_csv(cls, path) -> "PromptVocabulary":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append((row["attribute"], int(row["class_index"]), row["description"]))
        return cls(rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attribute", "class_index", "description"])
            for (attr, idx), desc in sorted(self.by_key.items()):
                w.writerow([attr, idx, desc])

    def description(self, attribute: str, class_index: int) -> str:
        try:
            return self.by_key[(attribute, class_index)]
        except KeyError:
            raise CorpusError(f"vocabulary has no entry for {(attribute, class_index)}")

    def descriptions_for(self, attribute: str) -> list[str]:
        keys = sorted(k for k in self.by_key if k[0] == attribute)
        return [self.by_key[k] for k in keys]

    def attributes(self) -> list[str]:
        return sorted({attr for attr, _ in self.by_key})

    def all_texts(self) -> list[str]:
        return list(self.by_key.values()) + [self.neutral]


class OntologyMapping:
    """(attribute, source dataset, native class string) -> unified class index.

    Gender rows map onto {0,1,2}; attribute rows onto the unified per-attribute
    index space. Unmapped attribute classes become the ignore index and are
    listed in the audit.
    """

    def __init__(self, rows: list[tuple[str, str, str, int]]):
        self.table: dict[tuple[str, str, str], int] = {}
        used: dict[tuple[str, str], dict[int, str]] = defaultdict(dict)
        for attr, source, native, unified in rows:
            key = (attr, source, native.strip().lower())
            if key in self.table:
                raise CorpusError(f"duplicate mapping row for {key}")
            unified = int(unified)
            seen = used[(attr, source)]
            if unified in seen and seen[unified] != key[2] and attr != "gender":
                raise CorpusError(
                    f"mapping for {attr}/{source} sends {seen[unified]!r} and "
                    f"{key[2]!r} to the same index {unified}")
            seen[unified] = key[2]
            self.table[key] = unified

    @classmethod
    def from_csv(cls, path) -> "OntologyMapping":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append((row["attribute"], row["source"], row["native_class"],
                             int(row["unified_index"])))
        return cls(rows)

    def lookup(self, attribute: str, source: str, native: str) -> int | None:
        return self.table.get((attribute, source, native.strip().lower()))


@dataclass
class AuditReport:
    """Counts per split/gender/source plus anything the mapping could not place."""

    per_split_gender: dict[str, Counter] = field(default_factory=lambda: defaultdict(Counter))
    per_source: Counter = field(default_factory=Counter)
    unmapped: Counter = field(default_factory=Counter)
    total: int = 0

    def split_total(self, split: str) -> int:
        return sum(self.per_split_gender[split].values())

    def grand_total(self) -> int:
        return sum(self.split_total(s) for s in self.per_split_gender)

    def consistent(self) -> bool:
        return self.grand_total() == self.total

    def lines(self) -> list[str]:
        out = ["split,male,female,unknown,total"]
        for split in SPLITS:
            c = self.per_split_gender.get(split, Counter())
            out.append(f"{split},{c.get(0, 0)},{c.get(1, 0)},{c.get(2, 0)},{sum(c.values())}")
        out.append(f"all,,,,{self.grand_total()}")
        out.append(f"records,,,,{self.total}")
        out.append(f"totals_consistent,,,,{str(self.consistent()).lower()}")
        for (attr, source, native), n in sorted(self.unmapped.items()):
            out.append(f"unmapped,{attr},{source},{native},{n}")
        return out


def harmonize(source_rows: list[dict], mapping: OntologyMapping,
              attributes: tuple[str, ...] = SEVEN_ATTRIBUTES) -> tuple[list[SampleRecord], AuditReport]:
    """Map native annotations onto the unified ontology.

    Uncertain gender stays Unknown; unmapped attribute classes become the
    ignore index and are tallied. Identities present in more than one split
    abort with an error naming the identity.
    """
    audit = AuditReport()
    records: list[SampleRecord] = []
    identity_split: dict[str, str] = {}
    for row in source_rows:
        source = row.get("source", "unknown")
        split = row["split"]
        if split not in SPLITS:
            raise CorpusError(f"unknown split {split!r}")
        identity = str(row["identity"])
        prior = identity_split.get(identity)
        if prior is None:
            identity_split[identity] = split
        elif prior != split:
            raise CorpusError(f"identity {identity!r} appears in splits {prior!r} and {split!r}")

        g = mapping.lookup("gender", source, str(row["gender"]))
        if g is None:
            g = UNKNOWN
            audit.unmapped[("gender", source, str(row["gender"]))] += 1
        attr_values: dict[str, int] = {}
        for attr in attributes:
            native = row.get(attr, "")
            if native in ("", None):
                attr_values[attr] = IGNORE_INDEX
                continue
            unified = mapping.lookup(attr, source, str(native))
            if unified is None:
                attr_values[attr] = IGNORE_INDEX
                audit.unmapped[(attr, source, str(native))] += 1
            else:
                attr_values[attr] = unified

        audit.per_split_gender[split][g] += 1
        audit.per_source[source] += 1
        audit.total += 1
        records.append(SampleRecord(
            gender=g, attributes=attr_values, prompt=row.get("prompt", ""),
            identity=identity, split=split, source=source,
            path=row.get("path"),
            distance_m=_opt_float(row.get("distance_m")),
            height_m=_opt_float(row.get("height_m")),
            angle_deg=_opt_int(row.get("angle_deg")),
        ))
    return records, audit


def _opt_float(v) -> float | None:
    if v in (None, ""):
        return None
    return float(v)


def _opt_int(v) -> int | None:
    if v in (None, ""):
        return None
    return int(float(v))


def compose_prompt(record: SampleRecord, vocab: PromptVocabulary, mode: str = "neutral") -> str:
    """Join the descriptions of the record's labeled attribute classes.

    ``neutral``: missing attributes contribute the neutral prompt (once).
    ``omit``: missing attributes are skipped; fully unlabeled records yield the
    empty string, which the text encoder maps to the neutral prompt.
    """
    if mode not in ("neutral", "omit"):
        raise CorpusError(f"unknown prompt mode {mode!r}")
    parts = []
    missing = False
    for attr in sorted(record.attributes):
        idx = record.attributes[attr]
        if idx == IGNORE_INDEX:
            missing = True
            continue
        parts.append(vocab.description(attr, idx))
    if mode == "neutral" and missing:
        parts.append(vocab.neutral)
    return ", ".join(parts)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of [H,W,C] float data."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    def coords(n_out, n_in):
        if n_out == 1:
            return np.zeros(1), np.zeros(1, dtype=int), np.zeros(1, dtype=int)
        c = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.clip(np.floor(c).astype(int), 0, max(n_in - 2, 0))
        return c - lo, lo, np.minimum(lo + 1, n_in - 1)

    fy, y0, y1 = coords(out_h, h)
    fx, x0, x1 = coords(out_w, w)
    top = image[y0][:, x0] * (1 - fx)[None, :, None] + image[y0][:, x1] * fx[None, :, None]
    bot = image[y1][:, x0] * (1 - fx)[None, :, None] + image[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def normalize_image(pixels: np.ndarray, size: int, train: bool = False,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """uint8 [H,W,3] -> normalized float64 [3,size,size].

    Scales to [0,1], resizes, applies per-channel mean/std; training mode also
    flips horizontally with probability 0.5 using the supplied generator.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise CorpusError(f"expected RGB [H,W,3] input, got shape {pixels.shape}")
    img = pixels.astype(np.float64) / 255.0
    img = resize_bilinear(img, size, size)
    img = (img - CLIP_MEAN) / CLIP_STD
    chw = img.transpose(2, 0, 1)
    if train:
        if rng is None:
            raise CorpusError("training-mode normalization needs a random generator")
        if rng.random() < 0.5:
            chw = chw[:, :, ::-1]
    return np.ascontiguousarray(chw)


def _bin_label(value: float, edges: tuple[float, ...], prefix: str) -> str:
    if value <= edges[0]:
        return f"{prefix}<={edges[0]:g}m"
    for lo, hi in zip(edges, edges[1:]):
        if lo < value <= hi:
            return f"{lo:g}<{prefix}<={hi:g}m"
    return f"{prefix}>{edges[-1]:g}m"


@dataclass(frozen=True)
class StratumBins:
    distance_edges: tuple[float, ...] = DISTANCE_EDGES
    height_edges: tuple[float, ...] = HEIGHT_EDGES


def bin_metadata(record: SampleRecord, bins: StratumBins = StratumBins()) -> str:
    """Stratum key "<angle>deg|<bin>"; missing metadata lands in "unbinned".

    Bins are left-open/right-closed; nadir (90 degree) samples bin by height,
    oblique ones by distance.
    """
    if record.angle_deg is None:
        return "unbinned"
    if record.angle_deg == 90 and record.height_m is not None:
        return f"{record.angle_deg}deg|{_bin_label(record.height_m, bins.height_edges, 'H')}"
    if record.distance_m is not None:
        return f"{record.angle_deg}deg|{_bin_label(record.distance_m, bins.distance_edges, 'D')}"
    if record.height_m is not None:
        return f"{record.angle_deg}deg|{_bin_label(record.height_m, bins.height_edges, 'H')}"
    return "unbinned"


# -- CSV round trip ---------------------------------------------------------------


def save_corpus(records: list[SampleRecord], out_dir, write_images: bool = True) -> Path:
    from .imageio import write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_dir = out / "images"
    csv_path = out / "corpus.csv"
    if write_images:
        img_dir.mkdir(exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i, rec in enumerate(records):
            path = rec.path
            if write_images and rec.pixels is not None:
                path = f"images/{i:05d}.ppm"
                write_ppm(rec.pixels, out / path)
            row = [path or "", rec.gender]
            for attr in SEVEN_ATTRIBUTES:
                row.append(rec.attributes.get(attr, IGNORE_INDEX))
            row.extend([
                rec.prompt, rec.identity, rec.split,
                "" if rec.distance_m is None else f"{rec.distance_m:.3f}",
                "" if rec.height_m is None else f"{rec.height_m:.3f}",
                "" if rec.angle_deg is None else rec.angle_deg,
                rec.source,
            ])
            w.writerow(row)
    return csv_path


def load_corpus(csv_path, with_images: bool = True) -> list[SampleRecord]:
    csv_path = Path(csv_path)
    base = csv_path.parent
    records: list[SampleRecord] = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise CorpusError(f"unexpected corpus header: {reader.fieldnames}")
        for row in reader:
            pixels = None
            if with_images and row["path"]:
                pixels = read_ppm(base / row["path"])
            records.append(SampleRecord(
                gender=int(row["gender"]),
                attributes={a: int(row[a]) for a in SEVEN_ATTRIBUTES},
                prompt=row["prompt"],
                identity=row["identity"],
                split=row["split"],
                source=row["source"],
                path=row["path"] or None,
                pixels=pixels,
                distance_m=_opt_float(row["distance_m"]),
                height_m=_opt_float(row["height_m"]),
                angle_deg=_opt_int(row["angle_deg"]),
            ))
    return records


def split_records(records: list[SampleRecord]) -> dict[str, list[SampleRecord]]:
    out = {s: [] for s in SPLITS}
    for rec in records:
        out[rec.split].append(rec)
    return out


def assert_split_hygiene(records: list[SampleRecord]) -> None:
    seen: dict[str, str] = {}
    for rec in records:
        prior = seen.get(rec.identity)
        if prior is None:
            seen[rec.identity] = rec.split
        elif prior != rec.split:
            raise CorpusError(f"identity {rec.identity!r} leaks across splits "
                              f"{prior!r} and {rec.split!r}")
