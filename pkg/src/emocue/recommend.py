"""Emotion-tagged music catalog and seeded playlist selection."""

import csv
import io
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import IntegrityError, SchemaError, ValidationError
from .net import EmotionLabel

HEADER = ("id", "title", "artist", "emotion", "uri")


@dataclass(frozen=True)
class Song:
    id: str
    title: str
    artist: str
    emotion: EmotionLabel
    uri: str


@dataclass(frozen=True)
class Catalog:
    songs: tuple
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        seen = set()
        index = {label: [] for label in EmotionLabel}
        for song in self.songs:
            if song.id in seen:
                raise ValidationError(f"duplicate song id {song.id!r}")
            seen.add(song.id)
            index[song.emotion].append(song)
        object.__setattr__(self, "songs", tuple(self.songs))
        object.__setattr__(self, "index", {k: tuple(v) for k, v in index.items()})

    def counts(self):
        return {label: len(songs) for label, songs in self.index.items()}

    def get(self, song_id):
        return next(s for s in self.songs if s.id == song_id)


@dataclass(frozen=True)
class Playlist:
    emotion: EmotionLabel
    song_ids: tuple
    seed: int
    no_songs: bool = False


def load_catalog(csv_text):
    """Parse catalog CSV (``id,title,artist,emotion,uri``); ``#`` lines before the header are comments."""
    lines = csv_text.splitlines(keepends=True)
    skipped = 0
    while skipped < len(lines) and lines[skipped].lstrip().startswith("#"):
        skipped += 1
    reader = csv.reader(io.StringIO("".join(lines[skipped:])))
    header = next(reader, None)
    if header is None:
        raise SchemaError("catalog is empty: missing header row")
    header = [h.strip() for h in header]
    missing = [h for h in HEADER if h not in header]
    if missing:
        raise SchemaError(f"catalog header is missing column(s): {', '.join(missing)}")
    col = {h: header.index(h) for h in HEADER}
    songs = []
    for row in reader:
        line_no = reader.line_num + skipped
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"row {line_no}: expected {len(header)} fields, got {len(row)}")
        tag = row[col["emotion"]].strip()
        try:
            emotion = EmotionLabel[tag.upper()]
        except KeyError:
            raise ValidationError(f"row {line_no}: unknown emotion {tag!r}") from None
        songs.append(Song(row[col["id"]], row[col["title"]], row[col["artist"]], emotion, row[col["uri"]]))
    return Catalog(tuple(songs))


def serialize_catalog(catalog):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for s in catalog.songs:
        writer.writerow([s.id, s.title, s.artist, s.emotion.display, s.uri])
    return buf.getvalue()


def bundled_catalog_text():
    return resources.files("emocue").joinpath("data/catalog.csv").read_text(encoding="utf-8")


def fisher_yates(items, rng):
    """Shuffled copy of ``items``: for i = n-1 .. 1 swap item i with item j ~ U{0..i}."""
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        out[i], out[j] = out[j], out[i]
    return out


def recommend(catalog, emotion, count, seed=0):
    """Seeded shuffle of the emotion's songs, truncated to ``count``."""
    if count < 1:
        raise ValidationError("playlist count must be positive")
    emotion = EmotionLabel(emotion)
    pool = catalog.index[emotion]
    if not pool:
        return Playlist(emotion, (), seed, no_songs=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    picked = fisher_yates(pool, rng)[:count]
    return Playlist(emotion, tuple(s.id for s in picked), seed)


def map_prediction(pred, tol=1e-4):
    total = sum(pred.probabilities)
    if abs(total - 1.0) > tol or any(p < 0 for p in pred.probabilities):
        raise IntegrityError(f"prediction probabilities sum to {total:.6g}, not 1")
    return pred.label


def playlist_json(catalog, playlist):
    return {
        "emotion": playlist.emotion.display,
        "seed": playlist.seed,
        "no_songs": playlist.no_songs,
        "songs": [{"id": s.id, "title": s.title, "artist": s.artist, "uri": s.uri}
                  for s in (catalog.get(i) for i in playlist.song_ids)],
    }
