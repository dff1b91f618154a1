import json
from dataclasses import replace

import numpy as np
import pytest

from hstf.features import flows_to_samples
from hstf.ingest import Direction, Label, load_labels, parse_capture, reassemble
from hstf.synth import GenProfile, default_profile, generate, generate_corpus, load_profile, write_corpus


def _url_len(flow):
    first = flow.direction(Direction.REQUEST)[0]
    return len(first.start_line.split(b" ")[1])


def test_same_seed_byte_identical(tmp_path):
    a = write_corpus(tmp_path / "a", generate_corpus(20, 20, "medium", seed=3))
    b = write_corpus(tmp_path / "b", generate_corpus(20, 20, "medium", seed=3))
    assert a[0].read_bytes() == b[0].read_bytes()
    assert a[1].read_bytes() == b[1].read_bytes()
    c = write_corpus(tmp_path / "c", generate_corpus(20, 20, "medium", seed=4))
    assert c[0].read_bytes() != a[0].read_bytes()


def test_url_length_threshold_separates_high():
    flows = generate_corpus(1000, 1000, "high", seed=42)
    lens = np.array([_url_len(f) for f in flows])
    mal = np.array([f.label is Label.MALICIOUS for f in flows])
    best = max(np.mean((lens > t) == mal) for t in np.unique(lens))
    assert best >= 0.9


def test_low_separability_overlaps():
    flows = generate_corpus(300, 300, "low", seed=42)
    lens = np.array([_url_len(f) for f in flows])
    mal = np.array([f.label is Label.MALICIOUS for f in flows])
    assert lens[mal].min() <= lens[~mal].max()


def test_single_message_profile():
    prof = replace(default_profile("trojan"), msgs_per_flow=(1, 1))
    for f in generate(prof, 50):
        assert len(f.direction(Direction.REQUEST)) == 1


def test_count_must_be_positive():
    with pytest.raises(ValueError):
        generate(default_profile("benign"), 0)


def test_profile_validation():
    with pytest.raises(ValueError):
        GenProfile(cls="worm")
    with pytest.raises(ValueError):
        GenProfile(url_len=(10, 5))


def test_profile_file_json_and_toml(tmp_path):
    j = tmp_path / "p.json"
    j.write_text(json.dumps({"cls": "trojan", "url_len": [30, 40], "seed": 5}))
    t = tmp_path / "p.toml"
    t.write_text('cls = "trojan"\nurl_len = [30, 40]\nseed = 5\n')
    assert load_profile(j) == load_profile(t)
    assert load_profile(j).url_len == (30, 40)


@pytest.mark.parametrize("sep", ["high", "medium", "low"])
def test_closure_through_ingest_and_features(tmp_path, sep):
    flows = generate_corpus(25, 35, sep, seed=8)
    jsonl, labels = write_corpus(tmp_path / "c", flows)
    back = load_labels(reassemble(parse_capture(jsonl.read_bytes())), labels)
    rejected = []
    samples = flows_to_samples(back, rejected=rejected)
    assert not rejected
    assert len(samples) == 60
    assert sum(s.label is Label.MALICIOUS for s in samples) == 25
    assert sum(s.label is Label.BENIGN for s in samples) == 35


def test_flow_ids_unique():
    flows = generate_corpus(500, 500, "high", seed=1)
    assert len({f.flow_id for f in flows}) == 1000
