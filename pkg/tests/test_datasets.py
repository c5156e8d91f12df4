import numpy as np
import pytest

from mtsconv.datasets import (DatasetManifest, SynthConfig, build_folds,
                              class_templates, load_fold, synth_generate)
from mtsconv.errors import DataError
from mtsconv.interp import resample_time


def equal_speaker_manifest(num_speakers=10, per_speaker=10):
    rows = []
    for s in range(num_speakers):
        for j in range(per_speaker):
            rows.append((f"u{s}_{j}", f"p{s}_{j}", (s + j) % 3, f"spk{s}"))
    return DatasetManifest.from_rows(rows)


class TestManifest:
    def test_labels_become_contiguous(self):
        m = DatasetManifest.from_rows([
            ("a", "p", "happy", "s1"), ("b", "p", "sad", "s2"), ("c", "p", "happy", "s1"),
        ])
        assert m.label_names == ("happy", "sad")
        assert [e.label for e in m.entries] == [0, 1, 0]
        assert m.num_classes == 2

    def test_rejects_empty_speaker(self):
        with pytest.raises(DataError):
            DatasetManifest.from_rows([("a", "p", 0, "")])

    def test_csv_roundtrip(self, tmp_path):
        m = equal_speaker_manifest(4, 3)
        m.write_csv(tmp_path / "m.csv")
        back = DatasetManifest.read_csv(tmp_path / "m.csv")
        assert back.entries == m.entries

    def test_csv_rejects_wrong_header(self, tmp_path):
        (tmp_path / "bad.csv").write_text("uid,file,cls,spk\na,b,0,s\n")
        with pytest.raises(DataError):
            DatasetManifest.read_csv(tmp_path / "bad.csv")


class TestFolds:
    def test_ten_equal_speakers_split_7_2_1(self):
        plan = build_folds(equal_speaker_manifest(10), seed=3)
        for split in plan.folds:
            assert len(split.train_speakers) == 7
            assert len(split.val_speakers) == 2
            assert len(split.test_speakers) == 1

    def test_speaker_disjointness_every_fold(self):
        plan = build_folds(equal_speaker_manifest(9, 7), seed=5)
        for split in plan.folds:
            tr, va, te = map(set, (split.train_speakers, split.val_speakers,
                                   split.test_speakers))
            assert not (tr & va) and not (tr & te) and not (va & te)

    def test_every_utterance_in_exactly_one_split(self):
        m = equal_speaker_manifest(11, 5)
        plan = build_folds(m, seed=1)
        for k in range(plan.num_folds):
            split = plan.split_entries(m, k)
            ids = [e.uid for part in split.values() for e in part]
            assert sorted(ids) == sorted(e.uid for e in m.entries)

    def test_test_blocks_are_disjoint_across_folds(self):
        plan = build_folds(equal_speaker_manifest(12, 4), seed=2)
        seen = set()
        for split in plan.folds:
            block = set(split.test_speakers)
            assert not (block & seen)
            seen |= block

    def test_deterministic_given_seed(self):
        m = equal_speaker_manifest(10)
        assert build_folds(m, seed=7) == build_folds(m, seed=7)
        assert build_folds(m, seed=7) != build_folds(m, seed=8)

    def test_giant_speaker_stays_in_training(self):
        rows = [(f"g{i}", "p", 0, "giant") for i in range(90)]
        for s in range(9):
            rows.append((f"u{s}", "p", 1, f"spk{s}"))
        plan = build_folds(DatasetManifest.from_rows(rows), seed=0)
        for split in plan.folds:
            assert "giant" in split.train_speakers

    def test_needs_four_speakers(self):
        with pytest.raises(DataError):
            build_folds(equal_speaker_manifest(3), seed=0)


class TestSynth:
    def test_templates_are_weakly_correlated(self):
        tpl = class_templates(4)
        for i in range(4):
            for j in range(i + 1, 4):
                corr = (tpl[i] * tpl[j]).sum() / (
                    np.linalg.norm(tpl[i]) * np.linalg.norm(tpl[j]))
                assert corr < 0.3

    def test_noiseless_unit_factor_embeds_template_exactly(self, tmp_path):
        cfg = SynthConfig(classes=2, samples_per_class=6, factors=(1.0,),
                          noise=0.0, speakers=4, seed=5)
        manifest, cache = synth_generate(cfg, tmp_path)
        tpl = class_templates(2, cfg.template_frames, cfg.bins)
        from mtsconv.audio import load_cache_entry
        for e in manifest.entries:
            frames, meta = load_cache_entry(cache, e.uid)
            onset = meta["onset"]
            window = frames[onset:onset + cfg.template_frames]
            assert np.array_equal(window, tpl[e.label])

    def test_deterministic_bytes(self, tmp_path):
        cfg = SynthConfig(classes=3, samples_per_class=9, speakers=6, seed=11)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        synth_generate(cfg, d1)
        synth_generate(cfg, d2)
        names1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
        names2 = sorted(p.relative_to(d2) for p in d2.rglob("*") if p.is_file())
        assert names1 == names2
        for name in names1:
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_speakers_pin_stretch_factors(self, tmp_path):
        cfg = SynthConfig(classes=2, samples_per_class=12, speakers=6, seed=1)
        manifest, cache = synth_generate(cfg, tmp_path)
        from mtsconv.audio import load_cache_entry
        by_speaker = {}
        for e in manifest.entries:
            _, meta = load_cache_entry(cache, e.uid)
            by_speaker.setdefault(e.speaker, set()).add(meta["factor"])
        # each synthetic speaker stretches by exactly one factor
        assert all(len(f) == 1 for f in by_speaker.values())
        assert set().union(*by_speaker.values()) == {0.5, 1.0, 2.0}

    def test_multi_scale_matcher_beats_single_scale_on_stretched_data(self, tmp_path):
        # template correlation comparison: max over scaled templates vs
        # the scale-1 template alone, on samples stretched by 0.5 / 2
        cfg = SynthConfig(classes=2, samples_per_class=30, factors=(0.5, 1.0, 2.0),
                          noise=0.4, speakers=6, seed=3)
        manifest, cache = synth_generate(cfg, tmp_path)
        tpl = class_templates(2, cfg.template_frames, cfg.bins)
        banks = {
            s: [resample_time(tpl[c], s, axis=0) for c in range(2)]
            for s in (0.5, 1.0, 2.0)
        }

        def best_score(frames, patt):
            t = patt.shape[0]
            scores = [
                (frames[u:u + t] * patt).sum() / np.linalg.norm(patt)
                for u in range(frames.shape[0] - t + 1)
            ]
            return max(scores)

        from mtsconv.audio import load_cache_entry
        single_hits = multi_hits = total = 0
        for e in manifest.entries:
            frames, meta = load_cache_entry(cache, e.uid)
            if meta["factor"] == 1.0:
                continue
            total += 1
            single = [best_score(frames, banks[1.0][c]) for c in range(2)]
            multi = [max(best_score(frames, banks[s][c]) for s in banks) for c in range(2)]
            single_hits += int(np.argmax(single)) == e.label
            multi_hits += int(np.argmax(multi)) == e.label
        assert total > 0
        assert multi_hits > single_hits


class TestLoadFold:
    def make_dataset(self, tmp_path, **kw):
        cfg = SynthConfig(classes=2, samples_per_class=50, speakers=8, seed=2, **kw)
        manifest, cache = synth_generate(cfg, tmp_path)
        plan = build_folds(manifest, seed=2)
        return manifest, plan, cache

    def test_batch_shapes_and_counts(self, tmp_path):
        manifest, plan, cache = self.make_dataset(tmp_path)
        fb = load_fold(manifest, plan, 0, cache, batch_size=32, seed=0)
        batches = list(fb.train_batches(0))
        n = fb.split_size("train")
        assert len(batches) == -(-n // 32)
        assert batches[0][0].shape[1:] == (1, 44, 20)
        sizes = [b[0].shape[0] for b in batches]
        assert sum(sizes) == n
        assert all(s == 32 for s in sizes[:-1])

    def test_each_epoch_is_a_permutation(self, tmp_path):
        manifest, plan, cache = self.make_dataset(tmp_path)
        fb = load_fold(manifest, plan, 0, cache, batch_size=16, seed=0)
        ids0 = [g for _, _, gs in fb.train_batches(0) for g in gs]
        ids1 = [g for _, _, gs in fb.train_batches(1) for g in gs]
        assert sorted(ids0) == sorted(ids1)
        assert ids0 != ids1  # reshuffled
        again = [g for _, _, gs in fb.train_batches(0) for g in gs]
        assert again == ids0  # same epoch, same order

    def test_val_order_is_stable(self, tmp_path):
        manifest, plan, cache = self.make_dataset(tmp_path)
        fb = load_fold(manifest, plan, 1, cache, batch_size=8, seed=0)
        first = [g for _, _, gs in fb.val_batches() for g in gs]
        second = [g for _, _, gs in fb.val_batches() for g in gs]
        assert first == second

    def test_train_stats_normalize_training_split(self, tmp_path):
        manifest, plan, cache = self.make_dataset(tmp_path)
        fb = load_fold(manifest, plan, 0, cache, batch_size=512, seed=0)
        x = np.concatenate([b[0] for b in fb.train_batches(0)])
        assert abs(x.mean()) < 1e-9
        assert abs(x.std() - 1.0) < 1e-6

    def test_missing_cache_names_utterance(self, tmp_path):
        manifest, plan, cache = self.make_dataset(tmp_path)
        victim = manifest.entries[0].uid
        (cache / f"{victim}.ten").unlink()
        with pytest.raises(DataError, match=victim):
            load_fold(manifest, plan, 0, cache)
