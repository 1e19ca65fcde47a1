import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtqa.corpus import (
    BBox,
    CorpusConfig,
    CorpusFormatError,
    QUALITY_BLURRED,
    QUALITY_CLEAN,
    QUALITY_TRUNCATED,
    appearance_order,
    corrupt_observation,
    corrupted_instance_fraction,
    generate_corpus,
    generate_video,
    load_corpus_config,
    make_qa,
    normalize_answer,
    qa_is_sound,
    read_corpus,
    write_corpus,
)
from vtqa.kvconfig import ConfigError


def single_instance_config() -> CorpusConfig:
    return CorpusConfig(
        num_frames_min=1,
        num_frames_max=1,
        instances_min=1,
        instances_max=1,
        blur_prob=0.0,
        corrupted_target=0.0,
    )


class TestBBox:
    def test_positive_extent_required(self):
        with pytest.raises(ValueError):
            BBox(cx=0.5, cy=0.5, w=0.0, h=0.1)

    def test_fully_inside(self):
        assert BBox(0.5, 0.5, 0.2, 0.1).visible_fraction() == 1.0

    def test_fully_outside(self):
        assert BBox(-1.0, 0.5, 0.2, 0.1).visible_fraction() == 0.0

    def test_half_visible(self):
        # Box straddling the left edge: exactly half the area inside.
        assert BBox(0.0, 0.5, 0.2, 0.1).visible_fraction() == pytest.approx(0.5)

    @given(
        st.floats(-1.5, 2.5),
        st.floats(-1.5, 2.5),
        st.floats(0.01, 0.5),
        st.floats(0.01, 0.5),
    )
    def test_fraction_in_unit_interval(self, cx, cy, w, h):
        assert 0.0 <= BBox(cx, cy, w, h).visible_fraction() <= 1.0


class TestCorruptObservation:
    def test_clean_identity(self):
        assert corrupt_observation("CARS", QUALITY_CLEAN, 1.0, random.Random(0)) == "CARS"

    def test_truncated_to_nothing(self):
        assert corrupt_observation("CARS", QUALITY_TRUNCATED, 0.0, random.Random(0)) == ""

    def test_blur_follows_rng_protocol(self):
        # Replay the documented rng protocol with an identical generator and
        # check the output position by position.
        canonical = "DRDG8A"
        alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
        out = corrupt_observation(
            canonical, QUALITY_BLURRED, 1.0, random.Random(99), sub_prob=0.5, alphabet=alphabet
        )
        replay = random.Random(99)
        expected_changed = []
        for ch in canonical:
            if replay.random() < 0.5:
                pool = [c for c in alphabet if c != ch]
                expected_changed.append(pool[replay.randrange(len(pool))])
            else:
                expected_changed.append(None)
        assert len(out) == len(canonical)
        for got, orig, changed in zip(out, canonical, expected_changed):
            if changed is None:
                assert got == orig
            else:
                assert got == changed
                assert got != orig

    @given(st.floats(0.0, 1.0), st.integers(0, 10_000))
    def test_truncation_length(self, fraction, seed):
        canonical = "ABCDEFG"
        out = corrupt_observation(canonical, QUALITY_TRUNCATED, fraction, random.Random(seed))
        assert len(out) == round(len(canonical) * fraction)
        assert canonical.startswith(out)

    def test_truncation_suffix_side(self):
        out = corrupt_observation("ABCDEF", QUALITY_TRUNCATED, 0.5, random.Random(0), keep="suffix")
        assert out == "DEF"

    def test_empty_canonical_rejected(self):
        with pytest.raises(ValueError):
            corrupt_observation("", QUALITY_CLEAN, 1.0, random.Random(0))


class TestGenerateVideo:
    def test_single_clean_instance(self):
        sample = generate_video(single_instance_config(), seed=3)
        assert len(sample.instances) == 1
        (inst,) = sample.instances
        assert len(inst.observations) == 1
        obs = inst.observations[0]
        assert obs.quality == QUALITY_CLEAN
        assert obs.ocr_text == inst.canonical_text

    def test_deterministic_serialization(self):
        config = CorpusConfig()
        a = json.dumps(generate_video(config, 11).to_dict())
        b = json.dumps(generate_video(config, 11).to_dict())
        assert a == b

    def test_rejects_oversized_text(self):
        config = CorpusConfig(text_len_max=40, box_height_min=0.2, box_height_max=0.3)
        with pytest.raises(ConfigError):
            generate_video(config, 0)

    def test_observation_invariants(self):
        for seed in range(30):
            sample = generate_video(CorpusConfig(), seed)
            for inst in sample.instances:
                frames = [o.frame for o in inst.observations]
                assert all(b > a for a, b in zip(frames, frames[1:]))
                assert inst.observations
                for obs in inst.observations:
                    assert obs.instance_id_gt == inst.id
                    truncated = obs.box.visible_fraction() < 1.0
                    assert (obs.quality == QUALITY_TRUNCATED) == truncated
                    if obs.quality == QUALITY_CLEAN:
                        assert obs.ocr_text == inst.canonical_text
                    if obs.quality == QUALITY_TRUNCATED:
                        kept = round(len(inst.canonical_text) * obs.box.visible_fraction())
                        assert len(obs.ocr_text) == kept

    def test_corruption_rate_near_target(self):
        samples = generate_corpus(CorpusConfig(), 150)
        n_instances = sum(len(s.instances) for s in samples)
        assert n_instances >= 500
        fraction = corrupted_instance_fraction(samples)
        assert abs(fraction - 0.65) <= 0.05

    def test_corruption_rate_seeds_0_to_999(self):
        # Direct enumeration over the first thousand seeds.
        samples = [generate_video(CorpusConfig(), seed) for seed in range(1000)]
        fraction = corrupted_instance_fraction(samples)
        assert abs(fraction - 0.65) <= 0.05

    def test_pairwise_temporal_overlap(self):
        samples = generate_corpus(CorpusConfig(), 50)
        overlap = pairs = 0
        for sample in samples:
            insts = sample.instances
            for i in range(len(insts)):
                for j in range(i + 1, len(insts)):
                    pairs += 1
                    lo = max(insts[i].first_frame, insts[j].first_frame)
                    hi = min(insts[i].last_frame, insts[j].last_frame)
                    overlap += lo <= hi
        assert overlap / pairs >= 0.5


class TestMakeQa:
    def test_single_instance_read_only(self):
        sample = generate_video(single_instance_config(), seed=5)
        qa = make_qa(sample, random.Random(0))
        assert qa, "read template always applies"
        assert all(item.template == "read" for item in qa)
        assert qa[0].answers == [normalize_answer(sample.instances[0].canonical_text)]

    def test_no_cooccurrence_no_spatial(self):
        # Two instances on disjoint frame ranges: only read QA possible.
        sample = generate_video(single_instance_config(), seed=5)
        inst = sample.instances[0]
        import copy

        other = copy.deepcopy(inst)
        other.id = inst.id + 1
        for obs in other.observations:
            obs.frame += 10
            obs.instance_id_gt = other.id
        sample.instances.append(other)
        sample.num_frames += 11
        qa = make_qa(sample, random.Random(0))
        assert all(not item.template.startswith("spatial") for item in qa)
        assert all(item.template != "concat" for item in qa)

    def test_left_relation_recomputed(self):
        # Deterministically search generated samples for a spatial_left QA
        # and re-derive the relation from the stored trajectories.
        found = 0
        for seed in range(40):
            sample = generate_video(CorpusConfig(), seed)
            order = appearance_order(sample.instances)
            texts = {normalize_answer(i.canonical_text): i for i in order}
            for qa in sample.qa:
                if qa.template != "spatial_left":
                    continue
                found += 1
                ref_text = qa.question.split("'")[1]
                ref = texts[ref_text]
                answer_inst = texts[qa.answers[0]]
                frames_ref = {o.frame for o in ref.observations}
                frames_ans = {o.frame for o in answer_inst.observations}
                common = sorted(frames_ref & frames_ans)
                assert common
                mid = (common[0] + common[-1]) // 2
                x_ref = next(o.box.cx for o in ref.observations if o.frame == mid)
                x_ans = next(o.box.cx for o in answer_inst.observations if o.frame == mid)
                assert x_ans < x_ref - 0.1
        assert found >= 3

    def test_all_generated_qa_sound(self):
        for seed in range(40):
            sample = generate_video(CorpusConfig(), seed)
            for qa in sample.qa:
                assert qa_is_sound(sample, qa), (seed, qa)

    def test_answers_normalized(self):
        for seed in range(20):
            sample = generate_video(CorpusConfig(), seed)
            for qa in sample.qa:
                for answer in qa.answers:
                    assert answer == normalize_answer(answer)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        samples = generate_corpus(CorpusConfig(), 100)
        path = tmp_path / "corpus.jsonl"
        write_corpus(samples, path)
        back = read_corpus(path)
        assert len(back) == len(samples)
        assert [s.to_dict() for s in back] == [s.to_dict() for s in samples]

    def test_round_trip_byte_identical(self, tmp_path):
        samples = generate_corpus(CorpusConfig(), 5)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_corpus(samples, a)
        write_corpus(read_corpus(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_corpus(path) == []

    def test_truncated_line_reports_position(self, tmp_path):
        samples = generate_corpus(CorpusConfig(), 2)
        path = tmp_path / "broken.jsonl"
        write_corpus(samples, path)
        text = path.read_text()
        path.write_text(text[: len(text) - 30])
        with pytest.raises(CorpusFormatError, match="line 2"):
            read_corpus(path)

    def test_missing_field_named(self, tmp_path):
        sample = generate_video(CorpusConfig(), 0).to_dict()
        del sample["num_frames"]
        path = tmp_path / "missing.jsonl"
        path.write_text(json.dumps(sample) + "\n")
        with pytest.raises(CorpusFormatError, match="num_frames"):
            read_corpus(path)


class TestConfigFile:
    def test_load(self, tmp_path):
        path = tmp_path / "corpus.cfg"
        path.write_text("num_frames_min = 4\nnum_frames_max = 6\nseed = 9\n")
        config = load_corpus_config(path)
        assert (config.num_frames_min, config.num_frames_max, config.seed) == (4, 6, 9)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "corpus.cfg"
        path.write_text("frames = 4\n")
        with pytest.raises(ConfigError, match="frames"):
            load_corpus_config(path)

    def test_invalid_probability_rejected(self, tmp_path):
        path = tmp_path / "corpus.cfg"
        path.write_text("blur_prob = 1.5\n")
        with pytest.raises(ConfigError):
            load_corpus_config(path)
