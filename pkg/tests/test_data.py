"""Synthetic grid-world task: generation determinism, rendering rules,
question/answer consistency, exact question-only baselines, and the QVD1
file format."""

import numpy as np
import pytest

from qghc import data as D
from qghc.tensor import Rng


class TestSceneGeneration:
    def test_deterministic_per_seed(self):
        a = D.generate_scene(Rng(5).derive(1, 0))
        b = D.generate_scene(Rng(5).derive(1, 0))
        assert a == b

    def test_object_count_in_range_and_cells_distinct(self):
        for i in range(200):
            scene = D.generate_scene(Rng(0).derive(1, i))
            assert 1 <= len(scene.objects) <= 6
            cells = [(o.row, o.col) for o in scene.objects]
            assert len(set(cells)) == len(cells)

    def test_shape_frequencies_near_uniform(self):
        counts = np.zeros(3)
        rng_base = Rng(123)
        for i in range(10000):
            for obj in D.generate_scene(rng_base.derive(1, i)).objects:
                counts[obj.shape] += 1
        freqs = counts / counts.sum()
        assert np.abs(freqs - 1 / 3).max() < 0.03


class TestRendering:
    def test_single_red_square_pixel_count(self):
        scene = D.SceneSpec((D.SceneObject(1, 2, 0, 0),))  # red square
        img = D.render_image(scene)
        red_object = (img[0] == 1.0) & (img[1] == 0.1) & (img[2] == 0.1)
        assert int(red_object.sum()) == 36  # filled 6x6 block
        # everything else is pure background
        background = ~red_object
        assert np.all(img[:, background] == 0.1)

    def test_mask_pixel_counts_match_raster_rules(self):
        # Independent recount from the stated geometry.
        square = sum(1 for r in range(8) for c in range(8)
                     if 1 <= r < 7 and 1 <= c < 7)
        disc = sum(1 for r in range(8) for c in range(8)
                   if (r - 3.5) ** 2 + (c - 3.5) ** 2 <= 9.0)
        tri = sum(1 for r in range(8) for c in range(8)
                  if 1 <= r < 7 and 1 <= c < 7 and (r - 1) >= (c - 1))
        assert [int(m.sum()) for m in D.MASKS] == [square, disc, tri] == [36, 32, 21]

    def test_rendering_is_pure(self):
        scene = D.generate_scene(Rng(1).derive(1, 7))
        assert D.render_image(scene).tobytes() == D.render_image(scene).tobytes()

    def test_yellow_uses_red_plus_green(self):
        scene = D.SceneSpec((D.SceneObject(0, 0, 0, 3),))  # yellow square
        img = D.render_image(scene)
        assert img[0, 1, 1] == 1.0 and img[1, 1, 1] == 1.0 and img[2, 1, 1] == 0.1

    def test_values_in_unit_range(self):
        img = D.render_image(D.generate_scene(Rng(2).derive(1, 3)))
        assert img.min() >= 0.0 and img.max() <= 1.0 and img.dtype == np.float32


class TestQuestions:
    def _questions_for_scene(self, scene, n=300, seed=77):
        out = []
        for i in range(n):
            rng = Rng(seed).derive(4, i)
            try:
                out.append(D.generate_question(scene, rng))
            except D.SceneRejected:
                continue
        return out

    def test_unique_square_color_question(self):
        scene = D.SceneSpec((D.SceneObject(1, 1, 0, 0),))  # one red square
        for tokens, length, answer in self._questions_for_scene(scene):
            if D.question_family(tokens) == "color":
                assert D.question_text(tokens, length) == "what color is the square"
                assert D.ANSWERS[answer] == "red"

    def test_count_two_green(self):
        scene = D.SceneSpec((D.SceneObject(0, 0, 0, 1), D.SceneObject(2, 3, 1, 1)))
        for tokens, length, answer in self._questions_for_scene(scene):
            if (D.question_family(tokens) == "count"
                    and D.question_text(tokens, length) == "how many green things"):
                assert D.ANSWERS[answer] == "2"

    def test_existence_answers_match_scene(self):
        scene = D.SceneSpec((D.SceneObject(0, 0, 2, 2),))  # one blue triangle
        for tokens, length, answer in self._questions_for_scene(scene):
            if D.question_family(tokens) != "exist":
                continue
            words = D.question_text(tokens, length).split()
            color, shape = words[3], words[4]
            expected = "yes" if (color, shape) == ("blue", "triangle") else "no"
            assert D.ANSWERS[answer] == expected

    def test_count_above_cap_rejects_scene(self):
        objs = tuple(D.SceneObject(i // 4, i % 4, 0, 0) for i in range(5))  # 5 reds
        scene = D.SceneSpec(objs)
        rejected = False
        for i in range(200):
            try:
                D.generate_question(scene, Rng(11).derive(4, i))
            except D.SceneRejected:
                rejected = True
                break
        assert rejected

    def test_answers_stay_within_list(self):
        for i in range(300):
            _, _, tokens, length, answer = D.generate_sample(3, i)
            assert 0 <= answer < len(D.ANSWERS)
            assert tokens[:length].max() < len(D.WORDS)
            assert np.all(tokens[length:] == 0)

    def test_family_derivation(self):
        cases = {
            ("what", "color", "is", "the", "square"): "color",
            ("what", "shape", "is", "the", "red", "thing"): "shape",
            ("how", "many", "blue", "things"): "count",
            ("is", "there", "a", "red", "disc"): "exist",
        }
        for words, family in cases.items():
            tokens, _ = D.tokenize(list(words))
            assert D.question_family(tokens) == family


class TestDatasetGeneration:
    def test_regeneration_is_bit_exact(self):
        a = D.generate_dataset(9, 50)
        b = D.generate_dataset(9, 50)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.tokens.tobytes() == b.tokens.tobytes()
        assert a.answers.tobytes() == b.answers.tobytes()

    def test_pure_function_of_seed_and_index(self):
        ds = D.generate_dataset(4, 20)
        for i in (0, 7, 19):
            _, img, tokens, length, answer = D.generate_sample(4, i)
            assert img.tobytes() == ds.images[i].tobytes()
            assert tokens.tolist() == ds.tokens[i].tolist()
            assert answer == int(ds.answers[i])

    def test_count_validation(self):
        with pytest.raises(ValueError):
            D.generate_dataset(1, 0)


class TestQuestionOnlyBaselines:
    def test_blind_optimal_on_handmade_corpus(self):
        # Two question strings: one answered 3/4 "red", one answered 1/2 "yes".
        tokens = np.zeros((6, D.MAX_TOKENS), dtype=np.uint16)
        tokens[:4, 0] = 1
        tokens[4:, 0] = 3
        answers = np.asarray([0, 0, 0, 1, 11, 12], dtype=np.uint16)
        ds = D.Dataset(np.zeros((6, 3, 32, 32), np.float32), tokens,
                       np.ones(6, np.uint8), answers, seed=0)
        assert D.blind_optimal_accuracy(ds) == pytest.approx(4 / 6)

    def test_majority_class_on_handmade_corpus(self):
        tokens = np.zeros((4, D.MAX_TOKENS), dtype=np.uint16)
        answers = np.asarray([5, 5, 5, 2], dtype=np.uint16)
        ds = D.Dataset(np.zeros((4, 3, 32, 32), np.float32), tokens,
                       np.ones(4, np.uint8), answers, seed=0)
        assert D.majority_class_accuracy(ds) == pytest.approx(0.75)

    def test_corpus_gates_on_ten_thousand(self):
        ds = D.generate_dataset(21, 10000)
        assert D.majority_class_accuracy(ds) < 0.40
        # no single question string is answerable above 60% from tokens alone
        buckets = {}
        for i in range(len(ds)):
            counts = buckets.setdefault(ds.tokens[i].tobytes(), {})
            a = int(ds.answers[i])
            counts[a] = counts.get(a, 0) + 1
        worst = max(max(c.values()) / sum(c.values()) for c in buckets.values())
        assert worst < 0.60
        assert D.blind_optimal_accuracy(ds) < 0.60

    def test_histogram_covers_all_answers(self):
        ds = D.generate_dataset(22, 5000)
        hist = D.answer_histogram(ds)
        assert set(hist) == set(D.ANSWERS)
        assert sum(hist.values()) == len(ds)
        assert all(hist[a] > 0 for a in D.ANSWERS)


class TestFileFormat:
    def _ds(self, n=60, seed=13):
        return D.generate_dataset(seed, n)

    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "toy.qvd"
        ds = self._ds()
        D.serialize_dataset(ds, path)
        back = D.load_dataset(path)
        assert back.images.tobytes() == ds.images.tobytes()
        assert back.tokens.tobytes() == ds.tokens.tobytes()
        assert back.lengths.tobytes() == ds.lengths.tobytes()
        assert back.answers.tobytes() == ds.answers.tobytes()
        assert back.vocab == ds.vocab and back.answer_list == ds.answer_list
        assert back.seed == ds.seed

    def test_serialization_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.qvd", tmp_path / "b.qvd"
        D.serialize_dataset(self._ds(), a)
        D.serialize_dataset(self._ds(), b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.qvd"
        D.serialize_dataset(self._ds(5), path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(D.BadMagicError):
            D.load_dataset(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "cut.qvd"
        D.serialize_dataset(self._ds(5), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 7])
        with pytest.raises(D.DatasetError):
            D.load_dataset(path)

    def test_permuted_answer_list_fails_checksum(self, tmp_path):
        path = tmp_path / "perm.qvd"
        D.serialize_dataset(self._ds(5), path)
        raw = path.read_bytes()
        # swap the equal-length answers "0" and "1" inside the header text
        swapped = raw.replace(b"0,1,2,3", b"1,0,2,3", 1)
        assert swapped != raw
        path.write_bytes(swapped)
        with pytest.raises(D.ChecksumError):
            D.load_dataset(path)

    def test_flipped_payload_fails_checksum(self, tmp_path):
        path = tmp_path / "flip.qvd"
        D.serialize_dataset(self._ds(5), path)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(D.ChecksumError):
            D.load_dataset(path)

    def test_token_index_overflow_detected(self, tmp_path):
        ds = self._ds(5)
        ds.tokens[2, 0] = 999  # outside the vocabulary
        path = tmp_path / "overflow.qvd"
        D.serialize_dataset(ds, path)
        with pytest.raises(D.IndexOverflowError):
            D.load_dataset(path)

    def test_answer_overflow_detected(self, tmp_path):
        ds = self._ds(5)
        ds.answers[0] = 13
        path = tmp_path / "ans.qvd"
        D.serialize_dataset(ds, path)
        with pytest.raises(D.IndexOverflowError):
            D.load_dataset(path)

    def test_question_text_round_trip(self):
        ds = self._ds(20)
        for i in range(len(ds)):
            text = ds.text(i)
            words = text.split()
            tokens, length = D.tokenize(words)
            assert tokens.tolist() == ds.tokens[i].tolist()
            assert length == int(ds.lengths[i])
