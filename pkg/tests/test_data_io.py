"""Tensor files, checkpoints, synthetic scenes, and the dataset layout."""

import numpy as np
import pytest

from patchseg.errors import (
    FormatError,
    GenerationError,
    IntegrityError,
    ValidationError,
)
from patchseg.params import ParamStore
from patchseg.spectral import layerwise_spectra
from patchseg.storage import (
    Checkpoint,
    load_checkpoint,
    load_params_into,
    read_dataset,
    read_scene,
    read_tensor,
    save_checkpoint,
    write_dataset,
    write_scene,
    write_tensor,
)
from patchseg.synth import (
    SyntheticSpec,
    category_prototypes,
    gen_dataset,
    gen_scene,
    gen_text_bank,
)


class TestTensorFormat:
    def test_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        tensor = rng.normal(size=(3, 4, 5))
        path = tmp_path / "t.stns"
        write_tensor(path, tensor)
        back = read_tensor(path)
        assert back.shape == (3, 4, 5)
        assert np.array_equal(back, tensor)

    def test_identical_tensors_produce_identical_bytes(self, tmp_path):
        tensor = np.random.default_rng(1).normal(size=(2, 6))
        write_tensor(tmp_path / "a.stns", tensor)
        write_tensor(tmp_path / "b.stns", tensor.copy())
        assert (tmp_path / "a.stns").read_bytes() == (tmp_path / "b.stns").read_bytes()

    def test_empty_extent_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            write_tensor(tmp_path / "e.stns", np.zeros((0,)))

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            write_tensor(tmp_path / "n.stns", np.array([1.0, np.inf]))

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        path = tmp_path / "x.stns"
        path.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(FormatError) as err:
            read_tensor(path)
        assert err.value.offset == 0

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "t.stns"
        write_tensor(path, np.ones((2, 2)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError) as err:
            read_tensor(path)
        assert err.value.offset is not None and err.value.offset > 0


class TestCheckpoint:
    @staticmethod
    def _store():
        rng = np.random.default_rng(0)
        store = ParamStore()
        store.register("sae.out.weight", rng.normal(size=(3, 4, 3, 3)), "core")
        store.register("smd.gate_scale", np.array(0.25), "core")
        store.register("adapter.12.scale", np.ones(4), "backbone")
        return store

    def test_round_trip_bitwise(self, tmp_path):
        store = self._store()
        ckpt = Checkpoint(params=store, step=17, config={"lr": 0.01})
        save_checkpoint(tmp_path / "ck", ckpt)
        back = load_checkpoint(tmp_path / "ck")
        assert back.step == 17
        assert back.config == {"lr": 0.01}
        for name in store.names():
            assert np.array_equal(back.params[name].value,
                                  store[name].value.reshape(back.params[name].value.shape))
            assert back.params[name].group == store[name].group

    def test_missing_payload_is_integrity_error(self, tmp_path):
        save_checkpoint(tmp_path / "ck", Checkpoint(self._store(), 0, {}))
        (tmp_path / "ck" / "param_0001.stns").unlink()
        with pytest.raises(IntegrityError, match="smd.gate_scale"):
            load_checkpoint(tmp_path / "ck")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "ck", Checkpoint(self._store(), 0, {}))
        manifest = (tmp_path / "ck" / "manifest.json").read_text()
        (tmp_path / "ck" / "manifest.json").write_text(
            manifest.replace('"format_version": 1', '"format_version": 9')
        )
        with pytest.raises(IntegrityError, match="version"):
            load_checkpoint(tmp_path / "ck")

    def test_shape_mismatch_names_parameter(self, tmp_path):
        store = self._store()
        save_checkpoint(tmp_path / "ck", Checkpoint(store, 0, {}))
        ckpt = load_checkpoint(tmp_path / "ck")
        other = ParamStore()
        other.register("sae.out.weight", np.zeros((3, 4, 3, 3)), "core")
        other.register("smd.gate_scale", np.zeros(()), "core")
        other.register("adapter.12.scale", np.ones(5), "backbone")
        from patchseg.errors import ConfigError

        with pytest.raises(ConfigError, match="adapter.12.scale"):
            load_params_into(other, ckpt)


SPEC = SyntheticSpec(seed=11, patch_h=8, patch_w=8, image_h=32, image_w=32,
                     channels=8, teacher_channels=4, embed_dim=6, categories=4)


class TestGenScene:
    def test_same_seed_is_bitwise_identical(self):
        a = gen_scene(SPEC)
        b = gen_scene(SPEC)
        for layer in a.pyramid:
            assert np.array_equal(a.pyramid[layer], b.pyramid[layer])
        assert np.array_equal(a.teacher, b.teacher)
        assert np.array_equal(a.masks, b.masks)
        assert np.array_equal(a.gt.labels, b.gt.labels)

    def test_different_scene_index_differs(self):
        from dataclasses import replace

        a = gen_scene(SPEC)
        b = gen_scene(replace(SPEC, scene_index=1))
        assert not np.array_equal(a.gt.labels, b.gt.labels) or not np.array_equal(
            a.pyramid[12], b.pyramid[12]
        )

    @pytest.mark.parametrize("seed", range(5))
    def test_spectra_monotone_with_depth(self, seed):
        from dataclasses import replace

        sample = gen_scene(replace(SPEC, seed=seed))
        report = layerwise_spectra(sample.pyramid, n_bins=8, r_c=0.25)
        assert report.monotone

    @pytest.mark.parametrize("seed", range(5))
    def test_masks_reconstruct_gt(self, seed):
        from dataclasses import replace

        sample = gen_scene(replace(SPEC, seed=seed, scene_index=seed))
        recon = np.argmax(sample.masks, axis=0)
        np.testing.assert_array_equal(recon, sample.gt.labels)

    @pytest.mark.parametrize("seed", range(5))
    def test_overlap_semantics(self, seed):
        from dataclasses import replace

        sample = gen_scene(replace(SPEC, seed=seed, scene_index=2 * seed))
        stacked = sample.masks.astype(bool)
        counts = stacked.sum(axis=0)
        assert np.all(counts >= 1)
        multi = np.argwhere(counts > 1)
        for y, x in multi:
            cats = np.where(stacked[:, y, x])[0]
            # later-drawn categories have lower indices and win the pixel
            assert sample.gt.labels[y, x] == cats.min()

    def test_blob_capacity_error(self):
        from dataclasses import replace

        with pytest.raises(GenerationError, match="capacity"):
            gen_scene(replace(SPEC, categories=6, blob_count=(2, 3)))

    def test_every_mask_has_support(self):
        sample = gen_scene(SPEC)
        assert np.all(sample.masks.sum(axis=(1, 2)) > 0)

    def test_shapes(self):
        sample = gen_scene(SPEC)
        assert sorted(sample.pyramid) == [2, 4, 6, 8, 10, 12]
        assert sample.pyramid[12].shape == (8, 8, 8)
        assert sample.teacher.shape == (4, 16, 16)
        assert sample.masks.shape == (4, 32, 32)
        assert sample.gt.labels.shape == (32, 32)


class TestTextBank:
    def test_rows_unit_norm(self):
        bank = gen_text_bank(SPEC)
        norms = np.linalg.norm(bank.embeddings, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_pairwise_cosines_separated(self):
        bank = gen_text_bank(SPEC)
        gram = bank.embeddings @ bank.embeddings.T
        off_diag = gram[~np.eye(len(bank.names), dtype=bool)]
        assert np.all(np.abs(off_diag) < 0.99)

    def test_same_seed_identical(self):
        a = gen_text_bank(SPEC)
        b = gen_text_bank(SPEC)
        assert np.array_equal(a.embeddings, b.embeddings)
        assert a.names == b.names

    def test_prototypes_orthonormal_before_scaling(self):
        protos = category_prototypes(SPEC)
        gram = protos @ protos.T / SPEC.proto_scale**2
        np.testing.assert_allclose(gram, np.eye(SPEC.categories), atol=1e-9)


class TestDatasetLayout:
    def test_scene_round_trip(self, tmp_path):
        sample = gen_scene(SPEC)
        write_scene(tmp_path / "s", sample)
        back = read_scene(tmp_path / "s", sorted(sample.pyramid))
        for layer in sample.pyramid:
            assert np.array_equal(back.pyramid[layer], sample.pyramid[layer])
        assert np.array_equal(back.teacher, sample.teacher)
        assert np.array_equal(back.masks, sample.masks)
        assert np.array_equal(back.gt.labels, sample.gt.labels)
        assert back.names == sample.names

    def test_dataset_round_trip(self, tmp_path):
        dataset = gen_dataset(SPEC, train_scenes=3, eval_scenes=2)
        write_dataset(tmp_path / "data", dataset, seed=SPEC.seed)
        back = read_dataset(tmp_path / "data")
        assert len(back.scenes) == 5
        assert back.train_ids == [0, 1, 2]
        assert back.eval_ids == [3, 4]
        assert np.array_equal(back.bank.embeddings, dataset.bank.embeddings)
        for a, b in zip(back.scenes, dataset.scenes):
            assert np.array_equal(a.gt.labels, b.gt.labels)
        assert back.spec_dict == SPEC.to_dict()

    def test_spec_dict_round_trip(self):
        spec = SyntheticSpec.from_dict(SPEC.to_dict())
        assert spec == SPEC

    def test_missing_layer_is_integrity_error(self, tmp_path):
        sample = gen_scene(SPEC)
        write_scene(tmp_path / "s", sample)
        (tmp_path / "s" / "pyramid_06.stns").unlink()
        with pytest.raises(IntegrityError, match="layer 6"):
            read_scene(tmp_path / "s", sorted(sample.pyramid))
