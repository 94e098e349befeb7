import numpy as np
import pytest

from promptcount.geometry import Box, Point
from promptcount.model import ImageInput, NoPositivePromptError
from promptcount.scenegen import SceneConfig, generate_scene
from promptcount.session import (
    NoRoundsError,
    UnknownRoundError,
    WouldLeaveNoPositiveError,
    add_prompt,
    create_session,
    remove_prompt,
    set_threshold,
)

POS_BOX = Box(0.2, 0.2, 0.45, 0.45)
NEG_BOX = Box(0.6, 0.6, 0.85, 0.85)


@pytest.fixture
def ref_image():
    img, _ = generate_scene(
        SceneConfig(image_size=64, n_target=(2, 2), size_range=(0.15, 0.25), seed=77)
    )
    return ImageInput.from_array(img)


class TestEncodeOnceContract:
    def test_target_encoded_exactly_once_over_rounds(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        for i in range(5):
            polarity = "positive" if i % 2 == 0 else "negative"
            box = Box(0.1 + 0.05 * i, 0.1, 0.3 + 0.05 * i, 0.3)
            add_prompt(s, box, polarity)
        assert s.encoder_invocations == {small_image.key: 1}

    def test_reference_encoded_once(self, tiny_model, small_image, ref_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        add_prompt(s, POS_BOX, "positive", ref_image=ref_image)
        add_prompt(s, NEG_BOX, "negative", ref_image=ref_image)
        assert s.encoder_invocations[small_image.key] == 1
        assert s.encoder_invocations[ref_image.key] == 1

    def test_per_round_model_cost(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        assert (s.prompt_encoder_calls, s.decoder_calls) == (1, 1)
        add_prompt(s, NEG_BOX, "negative")
        assert (s.prompt_encoder_calls, s.decoder_calls) == (2, 2)
        remove_prompt(s, 2)
        assert (s.prompt_encoder_calls, s.decoder_calls) == (3, 3)

    def test_set_threshold_runs_no_model(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        before = (
            dict(s.encoder_invocations),
            s.prompt_encoder_calls,
            s.decoder_calls,
        )
        set_threshold(s, 0.5)
        set_threshold(s, 0.1)
        after = (
            dict(s.encoder_invocations),
            s.prompt_encoder_calls,
            s.decoder_calls,
        )
        assert before == after


class TestPromptRounds:
    def test_first_negative_rejected(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        with pytest.raises(NoPositivePromptError):
            add_prompt(s, NEG_BOX, "negative")

    def test_round_numbers_increment(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        r1 = add_prompt(s, POS_BOX, "positive")
        r2 = add_prompt(s, NEG_BOX, "negative")
        assert (r1.round_number, r2.round_number) == (1, 2)

    def test_point_prompt(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        result = add_prompt(s, Point(0.3, 0.3), "positive")
        assert result.count >= 0

    def test_negative_never_increases_scores(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        before = dict(zip(map(tuple, map(Box.as_tuple, s.last_detections.boxes)),
                          s.last_detections.scores))
        add_prompt(s, NEG_BOX, "negative")
        after = s.last_detections
        for box, score in zip(after.boxes, after.scores):
            assert score <= before[box.as_tuple()] + 1e-12

    def test_cross_image_detections_in_target_frame(
        self, tiny_model, small_image, ref_image
    ):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive", ref_image=ref_image)
        # decoding consumed the target pyramid; boxes are valid target coords
        assert s.last_detections is not None
        for b in s.last_detections.boxes:
            assert 0.0 <= b.x_min < b.x_max <= 1.0


class TestRemovePrompt:
    def test_add_remove_add_is_deterministic(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        r1 = add_prompt(s, POS_BOX, "positive")
        remove_prompt(s, 1)
        r2 = add_prompt(s, POS_BOX, "positive")
        assert r1.count == r2.count
        assert r1.scores == r2.scores
        assert r1.boxes == r2.boxes

    def test_unknown_round(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        with pytest.raises(UnknownRoundError):
            remove_prompt(s, 42)

    def test_cannot_orphan_negatives(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        add_prompt(s, NEG_BOX, "negative")
        with pytest.raises(WouldLeaveNoPositiveError):
            remove_prompt(s, 1)

    def test_removing_negative_restores_scores(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        baseline = list(s.last_detections.s_pos)
        add_prompt(s, NEG_BOX, "negative")
        suppressed = list(s.last_detections.scores)
        remove_prompt(s, 2)
        restored = list(s.last_detections.scores)
        assert restored == baseline
        for r, sup in zip(restored, suppressed):
            assert r >= sup

    def test_remove_all_prompts_clears(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        result = remove_prompt(s, 1)
        assert result.count == 0
        assert s.last_detections is None


class TestThreshold:
    def test_requires_a_round(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        with pytest.raises(NoRoundsError):
            set_threshold(s, 0.5)

    def test_zero_keeps_all_queries(self, tiny_model, tiny_config, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        assert set_threshold(s, 0.0).count == tiny_config.num_queries

    def test_monotone_nonincreasing(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        counts = [set_threshold(s, t).count for t in np.linspace(0, 1, 11)]
        assert counts == sorted(counts, reverse=True)

    def test_out_of_range(self, tiny_model, small_image):
        s = create_session(small_image, tiny_model)
        add_prompt(s, POS_BOX, "positive")
        with pytest.raises(ValueError):
            set_threshold(s, 1.5)


class TestIsolationAndReplay:
    def test_sessions_are_isolated(self, tiny_model, small_image):
        s1 = create_session(small_image, tiny_model)
        s2 = create_session(small_image, tiny_model)
        add_prompt(s1, POS_BOX, "positive")
        assert s2.history == {}
        assert s2.last_detections is None
        assert s1.encoder_invocations[small_image.key] == 1
        assert s2.encoder_invocations[small_image.key] == 1
        assert s1.session_id != s2.session_id

    def test_history_replay_identical(self, tiny_model, small_image):
        def run():
            s = create_session(small_image, tiny_model)
            add_prompt(s, POS_BOX, "positive")
            add_prompt(s, Point(0.7, 0.3), "positive")
            result = add_prompt(s, NEG_BOX, "negative")
            return result

        r1, r2 = run(), run()
        assert r1.count == r2.count
        assert r1.scores == r2.scores
        assert r1.boxes == r2.boxes
