import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emocue import recommend
from emocue.errors import IntegrityError, SchemaError, ValidationError
from emocue.net import EmotionLabel, Prediction

TABLE_COUNTS = {"Happy": 20, "Sad": 30, "Angry": 20, "Surprise": 20, "Neutral": 20, "Disgust": 20, "Fear": 16}


@pytest.fixture(scope="module")
def catalog():
    return recommend.load_catalog(recommend.bundled_catalog_text())


def test_bundled_catalog_counts(catalog):
    assert len(catalog.songs) == 146
    assert {l.display: n for l, n in catalog.counts().items()} == TABLE_COUNTS
    assert sum(catalog.counts().values()) == len(catalog.songs)


def test_header_only_is_empty():
    cat = recommend.load_catalog("id,title,artist,emotion,uri\n")
    assert cat.songs == () and all(n == 0 for n in cat.counts().values())


def test_emotion_case_insensitive_and_quoting():
    text = 'id,title,artist,emotion,uri\na,"Song, with comma",X,hAPPy,u://a\n'
    cat = recommend.load_catalog(text)
    assert cat.songs[0].emotion is EmotionLabel.HAPPY and cat.songs[0].title == "Song, with comma"


def test_unknown_emotion_names_the_row():
    text = "id,title,artist,emotion,uri\na,T,A,Happy,u\nb,T,A,Melancholy,u\n"
    with pytest.raises(ValidationError, match="row 3"):
        recommend.load_catalog(text)


def test_duplicate_id():
    with pytest.raises(ValidationError, match="duplicate"):
        recommend.load_catalog("id,title,artist,emotion,uri\na,T,A,Sad,u\na,T,A,Sad,u\n")


def test_missing_column():
    with pytest.raises(SchemaError, match="uri"):
        recommend.load_catalog("id,title,artist,emotion\na,T,A,Sad\n")
    with pytest.raises(SchemaError):
        recommend.load_catalog("")


def test_ragged_row():
    with pytest.raises(ValidationError):
        recommend.load_catalog("id,title,artist,emotion,uri\na,T,Sad,u\n")


def test_sad_thirty(catalog):
    pl = recommend.recommend(catalog, EmotionLabel.SAD, 30, seed=1)
    assert len(pl.song_ids) == 30 and len(set(pl.song_ids)) == 30
    assert all(catalog.get(i).emotion is EmotionLabel.SAD for i in pl.song_ids)


def test_fear_capped_at_sixteen(catalog):
    pl = recommend.recommend(catalog, EmotionLabel.FEAR, 20, seed=1)
    assert len(pl.song_ids) == 16


def test_same_seed_same_order_different_seed_differs(catalog):
    a = recommend.recommend(catalog, EmotionLabel.HAPPY, 20, seed=5)
    b = recommend.recommend(catalog, EmotionLabel.HAPPY, 20, seed=5)
    c = recommend.recommend(catalog, EmotionLabel.HAPPY, 20, seed=6)
    assert a == b and a.song_ids != c.song_ids


def test_empty_emotion_flagged():
    cat = recommend.load_catalog("id,title,artist,emotion,uri\na,T,A,Sad,u\n")
    pl = recommend.recommend(cat, EmotionLabel.FEAR, 5, seed=0)
    assert pl.no_songs and pl.song_ids == ()


def test_count_must_be_positive(catalog):
    with pytest.raises(ValidationError):
        recommend.recommend(catalog, EmotionLabel.SAD, 0)


def test_fisher_yates_is_permutation_and_pure():
    items = list(range(10))
    out = recommend.fisher_yates(items, np.random.Generator(np.random.PCG64(0)))
    assert sorted(out) == items and items == list(range(10))


def test_shuffle_first_position_uniform():
    counts = {k: 0 for k in "abcde"}
    for seed in range(10_000):
        counts[recommend.fisher_yates(list("abcde"), np.random.Generator(np.random.PCG64(seed)))[0]] += 1
    assert all(0.15 <= v / 10_000 <= 0.25 for v in counts.values())


@st.composite
def catalogs(draw):
    n = draw(st.integers(0, 40))
    emos = draw(st.lists(st.sampled_from(list(EmotionLabel)), min_size=n, max_size=n))
    songs = tuple(recommend.Song(f"s{i}", f"t{i}", "a", e, f"u{i}") for i, e in enumerate(emos))
    return recommend.Catalog(songs)


@given(cat=catalogs(), emotion=st.sampled_from(list(EmotionLabel)), count=st.integers(1, 50),
       seed=st.integers(0, 2**64 - 1))
def test_playlists_are_pure_and_sized(cat, emotion, count, seed):
    pl = recommend.recommend(cat, emotion, count, seed)
    assert len(pl.song_ids) == min(count, cat.counts()[emotion])
    assert len(set(pl.song_ids)) == len(pl.song_ids)
    assert all(cat.get(i).emotion is emotion for i in pl.song_ids)


@given(cat=catalogs())
def test_serialize_load_identity(cat):
    assert recommend.load_catalog(recommend.serialize_catalog(cat)).songs == cat.songs


def test_map_prediction():
    assert recommend.map_prediction(Prediction.from_probs(np.eye(7)[4])) is EmotionLabel.SAD
    assert recommend.map_prediction(Prediction.from_probs(np.full(7, 1 / 7))) is EmotionLabel.ANGRY
    with pytest.raises(IntegrityError):
        recommend.map_prediction(Prediction.from_probs(np.full(7, 0.5 / 7)))


def test_playlist_json_shape(catalog):
    pl = recommend.recommend(catalog, EmotionLabel.NEUTRAL, 3, seed=2)
    doc = recommend.playlist_json(catalog, pl)
    assert doc["emotion"] == "Neutral" and doc["seed"] == 2
    assert [s["id"] for s in doc["songs"]] == list(pl.song_ids)
    assert set(doc["songs"][0]) == {"id", "title", "artist", "uri"}
