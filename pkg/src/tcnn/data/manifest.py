"""Dataset manifests: class tables plus labelled items with split tags."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .images import IMAGE_SUFFIXES, ImageDecodeError, probe

APPENDIX_MANIFESTS = ("imagenet-t", "imagenet-s1", "imagenet-s2")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Item:
    path: str
    class_id: int
    split: str = ""
    sample: str = ""


@dataclass
class DatasetManifest:
    classes: list[tuple[int, str]]
    items: list[Item] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        ids = [c for c, _ in self.classes]
        if ids != list(range(len(ids))):
            raise ManifestError("class ids must be dense 0..k-1 in order")
        seen = set()
        for it in self.items:
            if not 0 <= it.class_id < len(ids):
                raise ManifestError(f"{it.path}: class id {it.class_id} out of range")
            if it.path in seen:
                raise ManifestError(f"duplicate item path {it.path}")
            seen.add(it.path)

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def labels(self) -> list[str]:
        return [label for _, label in self.classes]

    def resolve(self, item: Item) -> Path:
        return (self.root / item.path) if self.root is not None else Path(item.path)

    def by_class(self) -> dict[int, list[Item]]:
        out: dict[int, list[Item]] = {c: [] for c, _ in self.classes}
        for it in self.items:
            out[it.class_id].append(it)
        return out


def scan_directory(root: str | Path) -> DatasetManifest:
    """``<root>/<class>/<images>``; classes and files in lexicographic order.

    An optional ``samples.txt`` inside a class directory maps
    ``<file name><TAB><sample id>`` for sample-rotation splits.
    """
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ManifestError(f"{root}: no class subdirectories")
    classes, items, errors = [], [], []
    for cid, d in enumerate(class_dirs):
        classes.append((cid, d.name))
        samples = {}
        sfile = d / "samples.txt"
        if sfile.exists():
            for line in sfile.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    fname, sid = line.split("\t")
                    samples[fname] = sid.strip()
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            warnings.warn(f"class directory {d} contains no images", stacklevel=2)
        for f in files:
            try:
                probe(f)
            except (OSError, ImageDecodeError) as exc:
                errors.append(str(exc) if str(f) in str(exc) else f"{f}: {exc}")
                continue
            items.append(Item(f"{d.name}/{f.name}", cid, "", samples.get(f.name, "")))
    if errors:
        raise ManifestError("unreadable files:\n  " + "\n  ".join(errors))
    return DatasetManifest(classes, items, root)


def read_manifest_file(path: str | Path) -> DatasetManifest:
    """Parse ``class_id<TAB>label`` lines followed by ``item<TAB>path<TAB>class_id<TAB>split``.

    A fifth item column, when present, holds the sample id.
    """
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)


def parse_manifest(text: str, root: Path | None = None) -> DatasetManifest:
    classes, items = [], []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if cols[0] == "item":
            if len(cols) not in (4, 5):
                raise ManifestError(f"line {n}: item lines need 4 or 5 columns")
            items.append(Item(cols[1], int(cols[2]), cols[3], cols[4] if len(cols) == 5 else ""))
        else:
            if len(cols) != 2:
                raise ManifestError(f"line {n}: class lines need 2 columns")
            classes.append((int(cols[0]), cols[1].strip()))
    return DatasetManifest(classes, items, root)


def format_manifest(m: DatasetManifest) -> str:
    lines = [f"{cid}\t{label}" for cid, label in m.classes]
    for it in m.items:
        cols = ["item", it.path, str(it.class_id), it.split] + ([it.sample] if it.sample else [])
        lines.append("\t".join(cols))
    return "\n".join(lines) + "\n"


def write_manifest_file(path: str | Path, m: DatasetManifest) -> None:
    Path(path).write_text(format_manifest(m), encoding="utf-8")


def appendix_manifest(name: str) -> DatasetManifest:
    """Bundled ImageNet subset class lists (ids and labels only, no images)."""
    if name not in APPENDIX_MANIFESTS:
        raise ManifestError(f"unknown bundled manifest {name!r}; choose from {APPENDIX_MANIFESTS}")
    text = resources.files("tcnn.data").joinpath("appendix", f"{name}.txt").read_text(encoding="utf-8")
    return parse_manifest(text)


def load_manifest(source: str | Path) -> DatasetManifest:
    """Bundled manifest name, manifest file, or class-per-directory root."""
    if str(source) in APPENDIX_MANIFESTS:
        return appendix_manifest(str(source))
    path = Path(source)
    if path.is_dir():
        return scan_directory(path)
    if path.is_file():
        return read_manifest_file(path)
    raise FileNotFoundError(f"no dataset at {source}")
