"""Dataset ingestion, preprocessing, binary embedding files, and synthesis.

The pipeline mirrors common sequential-recommendation preprocessing:
deduplicate raw (user, item, timestamp) records, iteratively drop users and
items with fewer than five appearances until stable, order each user's
items chronologically (stable on ties), reindex items to a contiguous
1-based catalog, and split leave-one-out: the last item is the test target,
the second-to-last the validation target, everything earlier is training
material. Sequences fed to the model keep the most recent `max_len` items,
left-padded with id 0.

Modality features ride in a small binary format (see write_embeddings) whose
rows follow catalog order. The synthetic generator produces walks over a
hidden successor graph together with feature vectors that genuinely encode
it, so desk-scale training has signal to find.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as nrng
from .errors import DataError, FormatError

__all__ = [
    "ItemMeta", "SequenceDataset", "read_interactions", "read_metadata",
    "five_core_filter", "build_sequences", "pad_truncate",
    "compose_item_text", "write_embeddings", "read_embeddings",
    "embedding_checksum", "save_dataset", "load_dataset", "preprocess",
    "synth_generate",
]

TEXT_TEMPLATE = "Title: {title}; Price: {price}; Brand: {brand}; Categories: {categories}"
MAX_LEN_DEFAULT = 50
MIN_COUNT = 5

EMB_MAGIC = b"NEMB"
EMB_VERSION = 1


@dataclass
class ItemMeta:
    title: str = ""
    price: str = ""
    brand: str = ""
    categories: str = ""
    image_ref: str | None = None


def compose_item_text(meta: ItemMeta) -> str:
    return TEXT_TEMPLATE.format(title=meta.title, price=meta.price,
                                brand=meta.brand, categories=meta.categories)


# ---------------------------------------------------------------------------
# ingestion


def _open_text(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "rt", encoding="utf-8")


def read_interactions(path) -> list[tuple[str, str, int]]:
    """Read tab-separated (user, item, timestamp) records, dropping exact
    duplicate triples while keeping first-seen order."""
    records = []
    seen = set()
    with _open_text(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, "
                    f"got {len(parts)}")
            user, item, ts_text = parts
            try:
                ts = int(ts_text)
            except ValueError:
                raise FormatError(
                    f"{path}:{lineno}: timestamp must be an integer, "
                    f"got {ts_text!r}") from None
            triple = (user, item, ts)
            if triple in seen:
                continue
            seen.add(triple)
            records.append(triple)
    return records


def read_metadata(path) -> dict[str, ItemMeta]:
    """Line-delimited JSON records keyed by item_id."""
    out: dict[str, ItemMeta] = {}
    with _open_text(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: bad record: {exc}") from None
            if "item_id" not in rec:
                raise FormatError(f"{path}:{lineno}: record missing item_id")
            out[str(rec["item_id"])] = ItemMeta(
                title=str(rec.get("title", "")),
                price=str(rec.get("price", "")),
                brand=str(rec.get("brand", "")),
                categories=str(rec.get("categories", "")),
                image_ref=rec.get("image_ref"))
    return out


# ---------------------------------------------------------------------------
# filtering and sequence construction


def five_core_filter(records: list[tuple[str, str, int]],
                     min_count: int = MIN_COUNT
                     ) -> tuple[list[tuple[str, str, int]], list[dict]]:
    """Iteratively drop users and items appearing fewer than `min_count`
    times until both constraints hold at once.

    Returns (surviving records in input order, per-iteration count history).
    Raises DataError carrying the history if nothing survives.
    """
    current = list(records)
    history: list[dict] = []
    while True:
        users: dict[str, int] = {}
        items: dict[str, int] = {}
        for user, item, _ in current:
            users[user] = users.get(user, 0) + 1
            items[item] = items.get(item, 0) + 1
        history.append({"users": len(users), "items": len(items),
                        "interactions": len(current)})
        bad_users = {u for u, c in users.items() if c < min_count}
        bad_items = {i for i, c in items.items() if c < min_count}
        if not bad_users and not bad_items:
            break
        current = [r for r in current
                   if r[0] not in bad_users and r[1] not in bad_items]
        if not current:
            trail = "; ".join(
                f"pass {n}: {h['users']} users, {h['items']} items, "
                f"{h['interactions']} interactions"
                for n, h in enumerate(history))
            raise DataError(
                f"{min_count}-core filtering removed everything ({trail})")
    return current, history


def build_sequences(records: list[tuple[str, str, int]]
                    ) -> tuple[list[str], list[list[str]]]:
    """Group records per user in chronological order (stable on timestamp
    ties). Users are returned in first-appearance order."""
    order: dict[str, list[tuple[int, int, str]]] = {}
    for pos, (user, item, ts) in enumerate(records):
        order.setdefault(user, []).append((ts, pos, item))
    users = list(order)
    sequences = []
    for user in users:
        entries = sorted(order[user], key=lambda e: (e[0], e[1]))
        sequences.append([item for _, _, item in entries])
    return users, sequences


def pad_truncate(seq: list[int], max_len: int = MAX_LEN_DEFAULT) -> list[int]:
    """Keep the most recent max_len items, left-padding with 0."""
    tail = list(seq[-max_len:])
    return [0] * (max_len - len(tail)) + tail


@dataclass
class SequenceDataset:
    """Reindexed per-user chronological sequences with leave-one-out splits.

    Item ids are 1-based; `catalog[i-1]` recovers item i's original id.
    For a user sequence s of length n: positions [0, n-2) are training
    material, s[n-2] is the validation target, s[n-1] the test target.
    """

    users: list[str]
    sequences: list[list[int]]
    catalog: list[str]
    max_len: int = MAX_LEN_DEFAULT
    item_text: list[str] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        for u, seq in zip(self.users, self.sequences):
            if len(seq) < 3:
                raise DataError(
                    f"user {u} has {len(seq)} interactions; leave-one-out "
                    f"splitting needs at least 3")

    @property
    def n_items(self) -> int:
        return len(self.catalog)

    def train_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Every (prefix, next item) pair inside the training region."""
        inputs, labels = [], []
        for seq in self.sequences:
            train = seq[:-2]
            for j in range(1, len(train)):
                inputs.append(pad_truncate(train[:j], self.max_len))
                labels.append(train[j])
        return (np.array(inputs, dtype=np.int64),
                np.array(labels, dtype=np.int64))

    def valid_batch(self) -> tuple[np.ndarray, np.ndarray]:
        inputs = [pad_truncate(seq[:-2], self.max_len)
                  for seq in self.sequences]
        labels = [seq[-2] for seq in self.sequences]
        return (np.array(inputs, dtype=np.int64),
                np.array(labels, dtype=np.int64))

    def test_batch(self) -> tuple[np.ndarray, np.ndarray]:
        inputs = [pad_truncate(seq[:-1], self.max_len)
                  for seq in self.sequences]
        labels = [seq[-1] for seq in self.sequences]
        return (np.array(inputs, dtype=np.int64),
                np.array(labels, dtype=np.int64))

    def train_item_counts(self) -> np.ndarray:
        """How often each item occurs in the training regions (index 0 is
        item 1)."""
        counts = np.zeros(self.n_items, dtype=np.int64)
        for seq in self.sequences:
            for item in seq[:-2]:
                counts[item - 1] += 1
        return counts


def reindex(users: list[str], item_sequences: list[list[str]]
            ) -> tuple[list[list[int]], list[str]]:
    """Map original item ids to contiguous 1-based indices in first-seen
    order; returns (index sequences, catalog)."""
    index: dict[str, int] = {}
    catalog: list[str] = []
    out = []
    for seq in item_sequences:
        row = []
        for item in seq:
            if item not in index:
                catalog.append(item)
                index[item] = len(catalog)
            row.append(index[item])
        out.append(row)
    return out, catalog


# ---------------------------------------------------------------------------
# embedding files


def embedding_checksum(payload: bytes) -> int:
    return int(np.frombuffer(payload, dtype=np.uint8,
                             count=len(payload)).sum(dtype=np.uint64))


def write_embeddings(path, arr: np.ndarray) -> int:
    """Binary feature matrix: magic, version/rows/cols u32, float32 data,
    all little-endian, closed by a u64 checksum (byte sum of everything
    before it, mod 2^64). Returns the checksum."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got {arr.shape}")
    body = EMB_MAGIC + struct.pack("<III", EMB_VERSION, arr.shape[0],
                                   arr.shape[1]) + arr.tobytes()
    check = embedding_checksum(body)
    Path(path).write_bytes(body + struct.pack("<Q", check))
    return check


def read_embeddings(path, expect_rows: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 12
    if len(raw) < header + 8:
        raise FormatError(
            f"{path}: truncated; {len(raw)} bytes cannot hold a header")
    if raw[:4] != EMB_MAGIC:
        raise FormatError(
            f"{path}: bad magic, expected {EMB_MAGIC!r}, found {raw[:4]!r}")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != EMB_VERSION:
        raise FormatError(
            f"{path}: unsupported version, expected {EMB_VERSION}, "
            f"found {version}")
    want_len = header + rows * cols * 4 + 8
    if len(raw) != want_len:
        raise FormatError(
            f"{path}: expected {want_len} bytes for {rows}x{cols}, "
            f"found {len(raw)}")
    body, tail = raw[:-8], raw[-8:]
    stated = struct.unpack("<Q", tail)[0]
    actual = embedding_checksum(body)
    if stated != actual:
        raise FormatError(
            f"{path}: checksum mismatch, expected {stated}, computed {actual}")
    if expect_rows is not None and rows != expect_rows:
        raise FormatError(
            f"{path}: expected {expect_rows} rows to match the catalog, "
            f"found {rows}")
    data = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=header)
    return data.reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# dataset directory


def save_dataset(out_dir, ds: SequenceDataset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sequences.tsv", "w", encoding="utf-8") as fh:
        for user, seq in zip(ds.users, ds.sequences):
            fh.write(f"{user}\t{','.join(str(i) for i in seq)}\n")
    with open(out / "catalog.tsv", "w", encoding="utf-8") as fh:
        for i, original in enumerate(ds.catalog, 1):
            fh.write(f"{i}\t{original}\n")
    if ds.item_text:
        with open(out / "item_text.tsv", "w", encoding="utf-8") as fh:
            for i, text in enumerate(ds.item_text, 1):
                fh.write(f"{i}\t{text}\n")
    manifest = dict(ds.manifest)
    manifest.setdefault("format_version", 1)
    manifest["n_users"] = len(ds.users)
    manifest["n_items"] = ds.n_items
    manifest["n_interactions"] = sum(len(s) for s in ds.sequences)
    manifest["n_valid_targets"] = len(ds.users)
    manifest["n_test_targets"] = len(ds.users)
    manifest["n_train_interactions"] = (manifest["n_interactions"]
                                        - 2 * len(ds.users))
    manifest["max_len"] = ds.max_len
    manifest["text_template"] = TEXT_TEMPLATE
    with open(out / "manifest.txt", "w", encoding="utf-8") as fh:
        for key, value in manifest.items():
            fh.write(f"{key} = {value}\n")


def _read_manifest(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key = value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_dataset(in_dir) -> SequenceDataset:
    root = Path(in_dir)
    if not (root / "manifest.txt").exists():
        raise DataError(f"{in_dir} has no manifest.txt; not a dataset directory")
    manifest = _read_manifest(root / "manifest.txt")
    users, sequences = [], []
    for lineno, raw in enumerate(
            (root / "sequences.tsv").read_text(encoding="utf-8").splitlines(), 1):
        user, _, items = raw.partition("\t")
        try:
            seq = [int(p) for p in items.split(",")]
        except ValueError:
            raise FormatError(
                f"{root / 'sequences.tsv'}:{lineno}: bad item index") from None
        users.append(user)
        sequences.append(seq)
    catalog_rows = {}
    for raw in (root / "catalog.tsv").read_text(encoding="utf-8").splitlines():
        idx, _, original = raw.partition("\t")
        catalog_rows[int(idx)] = original
    catalog = [catalog_rows[i] for i in range(1, len(catalog_rows) + 1)]
    item_text: list[str] = []
    text_path = root / "item_text.tsv"
    if text_path.exists():
        rows = {}
        for raw in text_path.read_text(encoding="utf-8").splitlines():
            idx, _, text = raw.partition("\t")
            rows[int(idx)] = text
        item_text = [rows.get(i, "") for i in range(1, len(catalog) + 1)]
    ds = SequenceDataset(
        users=users, sequences=sequences, catalog=catalog,
        max_len=int(manifest.get("max_len", MAX_LEN_DEFAULT)),
        item_text=item_text, manifest=manifest)
    stated_users = int(manifest.get("n_users", len(users)))
    stated_items = int(manifest.get("n_items", len(catalog)))
    if stated_users != len(users) or stated_items != len(catalog):
        raise FormatError(
            f"{in_dir}: manifest says {stated_users} users / {stated_items} "
            f"items, files hold {len(users)} / {len(catalog)}")
    top = max((max(s) for s in sequences), default=0)
    if top > len(catalog):
        raise FormatError(
            f"{in_dir}: sequence references item {top} beyond catalog size "
            f"{len(catalog)}")
    return ds


# ---------------------------------------------------------------------------
# end-to-end preprocessing


def preprocess(interactions_path, metadata_path=None, max_len: int = MAX_LEN_DEFAULT,
               min_count: int = MIN_COUNT) -> SequenceDataset:
    """Raw records to a ready dataset: dedup, metadata screen, core filter,
    chronological grouping, reindex, text composition."""
    records = read_interactions(interactions_path)
    meta = read_metadata(metadata_path) if metadata_path else None
    dropped_no_meta = 0
    if meta is not None:
        before = len(records)
        records = [r for r in records if r[1] in meta]
        dropped_no_meta = before - len(records)
        if not records:
            raise DataError("no interactions reference items present in the "
                            "metadata table")
    filtered, history = five_core_filter(records, min_count)
    users, raw_seqs = build_sequences(filtered)
    sequences, catalog = reindex(users, raw_seqs)
    item_text = []
    if meta is not None:
        item_text = [compose_item_text(meta[item]) for item in catalog]
    manifest = {
        "source": str(interactions_path),
        "min_count": min_count,
        "filter_passes": len(history),
        "filter_history": ";".join(
            f"{h['users']}u/{h['items']}i/{h['interactions']}r"
            for h in history),
        "dropped_without_metadata": dropped_no_meta,
        "image_missing_policy": "zero_vector",
    }
    return SequenceDataset(users=users, sequences=sequences, catalog=catalog,
                           max_len=max_len, item_text=item_text,
                           manifest=manifest)


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(n_users: int, n_items: int, noise: float, seed: int,
                   markov_order: int = 1, d_lang: int = 32, d_img: int = 16,
                   min_len: int = 8, max_len_walk: int = 16,
                   max_len: int = MAX_LEN_DEFAULT
                   ) -> tuple[SequenceDataset, np.ndarray, np.ndarray]:
    """Desk-scale dataset with a hidden successor structure.

    Items form a random successor graph (a permutation, so appearance counts
    stay balanced); each user walks it, deviating to a uniform random item
    with probability `noise`. Per-item feature vectors encode latent item
    codes — the "text" vector carries the item's own code plus its
    successor's, the "image" vector the item's code alone — with small
    observation noise, so modality features genuinely predict the next item.

    Returns (dataset, text features, image features); feature rows follow
    the reindexed catalog.
    """
    if n_items < 10:
        raise ValueError(f"need at least 10 items, got {n_items}")
    if markov_order != 1:
        raise ValueError("only first-order transition structure is supported")
    if not 0.0 <= noise <= 1.0:
        raise ValueError(f"noise must be a probability, got {noise}")
    gen = nrng.generator(seed, "synth")
    successor = gen.permutation(n_items)

    q = d_img
    codes = gen.standard_normal((n_items, q)) / np.sqrt(q)
    pad = np.zeros((n_items, max(0, d_lang - 2 * q)))
    lang_full = np.concatenate(
        [codes, codes[successor], pad], axis=1)[:, :d_lang]
    lang_full = lang_full + 0.1 * gen.standard_normal(lang_full.shape)
    img_full = codes + 0.1 * gen.standard_normal((n_items, q))

    records = []
    for u in range(n_users):
        length = int(gen.integers(min_len, max_len_walk + 1))
        item = int(gen.integers(0, n_items))
        user_id = f"U{u:05d}"
        for t in range(length):
            records.append((user_id, f"I{item:05d}", t))
            if gen.random() < noise:
                item = int(gen.integers(0, n_items))
            else:
                item = int(successor[item])

    filtered, history = five_core_filter(records)
    users, raw_seqs = build_sequences(filtered)
    sequences, catalog = reindex(users, raw_seqs)

    kinds = ["alpha", "beta", "gamma", "delta"]
    item_text = []
    original_rows = []
    for idx in catalog:
        row = int(idx[1:])
        original_rows.append(row)
        item_text.append(compose_item_text(ItemMeta(
            title=f"Synthetic item {row}",
            price=f"{(row % 97) / 4 + 1:.2f}",
            brand=f"maker-{row % 13}",
            categories=kinds[row % len(kinds)])))
    rows = np.array(original_rows)
    lang = lang_full[rows].astype(np.float32)
    img = img_full[rows].astype(np.float32)

    manifest = {
        "source": "synthetic",
        "synth_seed": seed,
        "synth_noise": noise,
        "synth_users": n_users,
        "synth_items": n_items,
        "d_lang": d_lang,
        "d_img": d_img,
        "min_count": MIN_COUNT,
        "filter_passes": len(history),
        "filter_history": ";".join(
            f"{h['users']}u/{h['items']}i/{h['interactions']}r"
            for h in history),
        "image_missing_policy": "zero_vector",
    }
    ds = SequenceDataset(users=users, sequences=sequences, catalog=catalog,
                         max_len=max_len, item_text=item_text,
                         manifest=manifest)
    return ds, lang, img
