import hashlib
import logging

import numpy as np
import pytest
from scipy import ndimage

from activemeta import synthdata as sd
from activemeta.errors import ConfigError, DataFormatError

DEFAULT = sd.GenConfig()


def components(mask):
    lab, n = ndimage.label(mask)
    return [int((lab == i).sum()) for i in range(1, n + 1)]


def test_determinism():
    a = sd.gen_patient("target", 5)
    b = sd.gen_patient("target", 5)
    assert a.equals(b)
    assert a.images.tobytes() == b.images.tobytes()


def test_shapes_and_labels():
    v = sd.gen_patient("source", 1)
    assert v.images.shape == (25, 4, 64, 64)
    assert v.labels.shape == (25, 64, 64)
    assert v.labels.dtype == np.uint8
    assert set(np.unique(v.labels)) <= {0, 1, 2, 3}
    assert v.images.min() >= 0.0 and v.images.max() <= 1.0
    assert len(v.slices) == 25 and v.slices[3].index == 3


def test_values_are_float32_representable():
    v = sd.gen_patient("target", 2)
    np.testing.assert_array_equal(v.images.astype(np.float32).astype(np.float64), v.images)


def test_target_lesions_smaller_than_source():
    src_min = min(a for seed in range(10) for z in sd.gen_patient("source", seed).labels
                  for a in components(z > 0))
    tgt_max = max(a for seed in range(10) for z in sd.gen_patient("target", seed).labels
                  for a in components(z > 0))
    assert tgt_max < src_min


def test_enhancing_contrast():
    cfg = DEFAULT
    for seed in range(10):
        for domain in ("source", "target"):
            v = sd.gen_patient(domain, seed, cfg)
            t1c = v.images[:, sd.T1C]
            enh = t1c[v.labels == sd.ENHANCING]
            if enh.size == 0:
                continue
            bg = t1c[v.labels == sd.BACKGROUND]
            assert enh.mean() - bg.mean() >= cfg.contrast_margin - 3 * cfg.noise_sigma


def test_lesion_counts_per_slice():
    src = [len(components(z > 0)) for seed in range(5) for z in sd.gen_patient("source", seed).labels]
    tgt = [len(components(z > 0)) for seed in range(5) for z in sd.gen_patient("target", seed).labels]
    assert set(src) <= {0, 1} and 0 in src
    assert set(tgt) <= {0, 1, 2, 3, 4} and 0 in tgt and max(tgt) >= 2


def test_enhancing_surrounds_necrosis():
    for seed in range(5):
        for domain in ("source", "target"):
            for z in sd.gen_patient(domain, seed).labels:
                nec = z == sd.NECROSIS
                if not nec.any():
                    continue
                # every necrotic component touches enhancing tissue
                lab, n = ndimage.label(nec)
                ring = ndimage.binary_dilation(nec) & ~nec
                for i in range(1, n + 1):
                    comp_ring = ndimage.binary_dilation(lab == i) & ~(lab == i)
                    assert (z[comp_ring & ring] == sd.ENHANCING).any()


def test_lesion_free_slices_exist():
    v = sd.gen_patient("source", 0)
    assert any(not (z > 0).any() for z in v.labels)


def test_skull_flag():
    with_skull = sd.gen_patient("source", 0, sd.GenConfig(noise_sigma=0.0))
    without = sd.gen_patient("source", 0, sd.GenConfig(noise_sigma=0.0, skull=False))
    assert (with_skull.images[:, 0] > 0.6).sum() > (without.images[:, 0] > 0.6).sum()
    np.testing.assert_array_equal(with_skull.labels, without.labels)


def test_config_invariant():
    with pytest.raises(ConfigError):
        sd.GenConfig(noise_sigma=0.2, contrast_margin=0.3)
    with pytest.raises(ConfigError):
        sd.gen_patient("lymphoma", 0)


def test_domain_aliases():
    assert sd.gen_patient("mets", 3).equals(sd.gen_patient("target", 3))


def test_round_trip(tmp_path):
    v = sd.gen_patient("source", 4, sd.GenConfig(image_size=32, slices=5))
    sd.write_patient(v, tmp_path / "p")
    assert sd.read_patient(tmp_path / "p").equals(v)


def test_truncated_volume_reports_sizes(tmp_path):
    v = sd.gen_patient("source", 4, sd.GenConfig(image_size=32, slices=5))
    d = sd.write_patient(v, tmp_path / "p")
    raw = (d / "volume.f32").read_bytes()
    (d / "volume.f32").write_bytes(raw[:-10])
    with pytest.raises(DataFormatError) as err:
        sd.read_patient(d)
    msg = str(err.value)
    assert "volume.f32" in msg and str(len(raw)) in msg and str(len(raw) - 10) in msg


def test_missing_key_named(tmp_path):
    v = sd.gen_patient("source", 4, sd.GenConfig(image_size=32, slices=2))
    d = sd.write_patient(v, tmp_path / "p")
    text = (d / "manifest.txt").read_text()
    (d / "manifest.txt").write_text("\n".join(l for l in text.splitlines() if not l.startswith("height")))
    with pytest.raises(DataFormatError) as err:
        sd.read_patient(d)
    assert err.value.field == "height"


def test_unknown_manifest_key_warns(tmp_path, caplog):
    v = sd.gen_patient("source", 4, sd.GenConfig(image_size=32, slices=2))
    d = sd.write_patient(v, tmp_path / "p")
    with open(d / "manifest.txt", "a", encoding="utf-8") as fh:
        fh.write("scanner=unknown\n")
    with caplog.at_level(logging.WARNING):
        assert sd.read_patient(d).equals(v)
    assert "scanner" in caplog.text


@pytest.mark.parametrize("n,train,val", [(30, 24, 6), (1, 1, 0), (5, 4, 1), (9, 8, 1)])
def test_split_counts(n, train, val):
    assert sd.split_counts(n) == (train, val)


def test_gen_dataset_layout(tmp_path):
    cfg = sd.GenConfig(image_size=16, slices=2)
    ds = sd.gen_dataset("target", 6, 50, cfg, tmp_path / "d")
    lines = (tmp_path / "d" / "dataset.txt").read_text().splitlines()
    assert lines[0] == "patient_000\ttrain" and lines[-1] == "patient_005\tval"
    assert sd.read_dataset(tmp_path / "d").entries == ds.entries
    vols = [sd.read_patient(p) for p in ds.dirs()]
    assert [v.seed for v in vols] == list(range(50, 56))
    digests = {hashlib.sha256(v.images.tobytes()).hexdigest() for v in vols}
    assert len(digests) == len(vols)
    assert len(sd.load_split(tmp_path / "d", "val")) == 1
