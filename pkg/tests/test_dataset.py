"""Raster loading, resizing, palette decoding, and split manifest tests.

The bilinear oracle below is an independent scalar implementation of the
half-pixel-center convention; block means for integer downsampling factors
are derived by hand.
"""

import json
import math

import numpy as np
import pytest
from PIL import Image

from corrseg import (
    DataError,
    DecodeError,
    FormatError,
    InvariantError,
    LabelMask,
    ManifestError,
    Palette,
    PaletteEntry,
    RgbTile,
    build_split,
    deepglobe_palette,
    load_palette,
    load_tile,
    mask_from_palette,
    mask_resize_nearest,
    palette_from_dict,
    palette_to_dict,
    render_mask,
    resize_bilinear,
    save_tile_png,
)
from corrseg.errors import ParameterError


def write_png(path, arr):
    Image.fromarray(arr).save(path, format="PNG")
    return path


def tiny_palette():
    return Palette(
        entries=(
            PaletteEntry(0, "a", (255, 0, 0)),
            PaletteEntry(1, "b", (0, 255, 0)),
            PaletteEntry(2, "c", (0, 0, 255)),
        ),
        ignore_id=2,
    )


class TestLoadTile:
    def test_single_white_pixel(self, tmp_path):
        p = write_png(tmp_path / "w.png", np.full((1, 1, 3), 255, dtype=np.uint8))
        tile = load_tile(p)
        assert (tile.h, tile.w) == (1, 1)
        assert tile.pixels.tolist() == [[[255, 255, 255]]]
        assert tile.source_path == str(p)
        assert tile.meters_per_pixel is None

    def test_rgb_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        tile = load_tile(write_png(tmp_path / "r.png", arr))
        assert np.array_equal(tile.pixels, arr)

    def test_grayscale_replicates_channels(self, tmp_path):
        arr = np.arange(6, dtype=np.uint8).reshape(2, 3) * 40
        tile = load_tile(write_png(tmp_path / "g.png", arr))
        for c in range(3):
            assert np.array_equal(tile.pixels[:, :, c], arr)

    def test_rgba_drops_alpha(self, tmp_path):
        arr = np.zeros((2, 2, 4), dtype=np.uint8)
        arr[..., 0] = 200
        arr[..., 3] = 7
        tile = load_tile(write_png(tmp_path / "a.png", arr))
        assert np.array_equal(tile.pixels[..., 0], arr[..., 0])
        assert tile.pixels.shape == (2, 2, 3)

    def test_dims_match_file_header(self, tmp_path):
        p = write_png(
            tmp_path / "d.png", np.zeros((11, 17, 3), dtype=np.uint8)
        )
        tile = load_tile(p)
        with Image.open(p) as img:
            assert (tile.w, tile.h) == img.size

    def test_missing_file(self, tmp_path):
        with pytest.raises(DecodeError):
            load_tile(tmp_path / "absent.png")

    def test_truncated_file(self, tmp_path):
        p = write_png(tmp_path / "t.png", np.zeros((8, 8, 3), dtype=np.uint8))
        data = p.read_bytes()
        bad = tmp_path / "bad.png"
        bad.write_bytes(data[: len(data) // 2])
        with pytest.raises(DecodeError):
            load_tile(bad)

    def test_sixteen_bit_rejected(self, tmp_path):
        p = tmp_path / "deep.png"
        Image.fromarray(np.zeros((2, 2), dtype=np.uint16)).save(p, format="PNG")
        with pytest.raises(FormatError):
            load_tile(p)

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        arr = rng.integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
        tile = RgbTile(4, 6, arr)
        save_tile_png(tile, tmp_path / "x.png")
        assert np.array_equal(load_tile(tmp_path / "x.png").pixels, arr)


def bilinear_oracle(px, out_h, out_w):
    in_h, in_w = px.shape[:2]
    out = np.zeros((out_h, out_w, 3))

    def axis(i, out_size, in_size):
        y = (i + 0.5) * in_size / out_size - 0.5
        y = min(max(y, 0.0), in_size - 1.0)
        lo = int(math.floor(y))
        return lo, min(lo + 1, in_size - 1), y - lo

    for i in range(out_h):
        r0, r1, tr = axis(i, out_h, in_h)
        for j in range(out_w):
            c0, c1, tc = axis(j, out_w, in_w)
            top = px[r0, c0] * (1 - tc) + px[r0, c1] * tc
            bot = px[r1, c0] * (1 - tc) + px[r1, c1] * tc
            out[i, j] = top * (1 - tr) + bot * tr
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


class TestResizeBilinear:
    def test_constant_image_stays_constant(self):
        tile = RgbTile(3, 3, np.full((3, 3, 3), 77, dtype=np.uint8))
        for dims in ((6, 6), (2, 5), (1, 1)):
            out = resize_bilinear(tile, *dims)
            assert (out.pixels == 77).all()

    def test_identity_is_exact(self):
        rng = np.random.default_rng(2)
        arr = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
        tile = RgbTile(5, 4, arr)
        out = resize_bilinear(tile, 5, 4)
        assert np.array_equal(out.pixels, arr)

    def test_halving_averages_blocks(self):
        # out coord (i+0.5)*2-0.5 lands exactly between rows 2i and 2i+1
        arr = np.zeros((4, 4, 3), dtype=np.uint8)
        arr[..., 0] = np.array(
            [[0, 4, 8, 12], [2, 6, 10, 14], [100, 104, 108, 112], [102, 106, 110, 114]]
        )
        out = resize_bilinear(RgbTile(4, 4, arr), 2, 2)
        expect = np.array([[3, 11], [103, 111]])
        assert np.array_equal(out.pixels[..., 0], expect)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(8):
            in_h, in_w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            out_h, out_w = int(rng.integers(1, 13)), int(rng.integers(1, 13))
            arr = rng.integers(0, 256, size=(in_h, in_w, 3), dtype=np.uint8)
            got = resize_bilinear(RgbTile(in_h, in_w, arr), out_h, out_w)
            assert np.array_equal(got.pixels, bilinear_oracle(arr, out_h, out_w))

    def test_output_within_input_range(self):
        rng = np.random.default_rng(4)
        arr = rng.integers(40, 200, size=(6, 6, 3), dtype=np.uint8)
        out = resize_bilinear(RgbTile(6, 6, arr), 13, 9)
        assert out.pixels.min() >= arr.min() and out.pixels.max() <= arr.max()

    def test_ground_resolution_scales(self):
        tile = RgbTile(
            10, 10, np.zeros((10, 10, 3), dtype=np.uint8), meters_per_pixel=0.5
        )
        assert resize_bilinear(tile, 1, 1).meters_per_pixel == 5.0
        assert resize_bilinear(tile, 20, 20).meters_per_pixel == 0.25

    def test_bad_dims(self):
        tile = RgbTile(2, 2, np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(ParameterError):
            resize_bilinear(tile, 0, 2)


class TestPaletteDecode:
    def test_uniform_class_zero(self):
        pal = tiny_palette()
        px = np.zeros((3, 3, 3), dtype=np.uint8)
        px[..., 0] = 255
        mask = mask_from_palette(RgbTile(3, 3, px), pal)
        assert (mask.labels == 0).all()
        assert mask.ignore_id == 2

    def test_render_decode_identity(self):
        pal = tiny_palette()
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 3, size=(6, 5))
        back = mask_from_palette(render_mask(LabelMask(6, 5, labels), pal), pal)
        assert np.array_equal(back.labels, labels)

    def test_class_histogram_matches_loop(self):
        pal = tiny_palette()
        rng = np.random.default_rng(6)
        labels = rng.integers(0, 3, size=(8, 8))
        mask = mask_from_palette(render_mask(LabelMask(8, 8, labels), pal), pal)
        for cid in range(3):
            expect = sum(
                1 for r in range(8) for c in range(8) if labels[r, c] == cid
            )
            assert int((mask.labels == cid).sum()) == expect

    def test_unlisted_color_reports_pixel(self):
        pal = tiny_palette()
        px = np.zeros((2, 2, 3), dtype=np.uint8)
        px[..., 0] = 255
        px[1, 0] = (9, 9, 9)
        tile = RgbTile(2, 2, px, source_path="field.png")
        with pytest.raises(DataError) as exc:
            mask_from_palette(tile, pal)
        msg = str(exc.value)
        assert "(9, 9, 9)" in msg and "row 1" in msg and "col 0" in msg
        assert "field.png" in msg

    def test_render_rejects_out_of_range(self):
        with pytest.raises(DataError):
            render_mask(LabelMask(1, 1, np.array([[5]])), tiny_palette())


class TestMaskResize:
    def test_constant(self):
        mask = LabelMask(2, 2, np.full((2, 2), 4))
        assert (mask_resize_nearest(mask, 5, 3).labels == 4).all()

    def test_identity(self):
        labels = np.arange(12).reshape(3, 4)
        out = mask_resize_nearest(LabelMask(3, 4, labels), 3, 4)
        assert np.array_equal(out.labels, labels)

    def test_doubling_makes_blocks(self):
        mask = LabelMask(2, 2, np.array([[0, 1], [2, 3]]))
        out = mask_resize_nearest(mask, 4, 4)
        expect = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
        assert np.array_equal(out.labels, expect)

    def test_never_invents_labels(self):
        rng = np.random.default_rng(7)
        labels = rng.integers(0, 5, size=(5, 7))
        out = mask_resize_nearest(LabelMask(5, 7, labels), 11, 3)
        assert set(np.unique(out.labels)) <= set(np.unique(labels))

    def test_downsample_allowed_unlike_upsample_mask(self):
        mask = LabelMask(4, 4, np.zeros((4, 4), dtype=np.int64))
        out = mask_resize_nearest(mask, 2, 2)
        assert (out.h, out.w) == (2, 2)


class TestPalette:
    def test_packaged_land_cover_palette(self):
        pal = deepglobe_palette()
        assert pal.n_classes == 7
        assert pal.ignore_id == 6
        assert pal.color_of(4) == (0, 0, 255)  # water
        names = [e.name for e in pal.entries]
        assert names[0] == "urban" and names[-1] == "unknown"

    def test_dict_roundtrip(self):
        pal = tiny_palette()
        assert palette_from_dict(palette_to_dict(pal)) == pal

    def test_file_roundtrip(self, tmp_path):
        p = tmp_path / "pal.json"
        p.write_text(json.dumps(palette_to_dict(tiny_palette())))
        assert load_palette(p) == tiny_palette()

    def test_duplicate_colors_rejected(self):
        with pytest.raises(InvariantError):
            Palette(
                entries=(
                    PaletteEntry(0, "a", (1, 2, 3)),
                    PaletteEntry(1, "b", (1, 2, 3)),
                )
            )

    def test_non_contiguous_ids_rejected(self):
        with pytest.raises(InvariantError):
            Palette(entries=(PaletteEntry(1, "a", (0, 0, 0)),))

    def test_ignore_id_must_be_a_class(self):
        with pytest.raises(InvariantError):
            Palette(entries=(PaletteEntry(0, "a", (0, 0, 0)),), ignore_id=3)

    def test_malformed_document(self):
        with pytest.raises(FormatError):
            palette_from_dict({"classes": [{"id": 0, "rgb": [0, 0, 0]}]})
        with pytest.raises(FormatError):
            palette_from_dict([1, 2, 3])

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ManifestError):
            load_palette(tmp_path / "nope.json")

    def test_invalid_json_file(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{")
        with pytest.raises(FormatError):
            load_palette(p)


def make_dataset(tmp_path, n_labeled=2, n_unlabeled=3):
    rng = np.random.default_rng(8)
    pal = tiny_palette()
    labeled, unlabeled = [], []
    for i in range(n_labeled):
        img = tmp_path / f"img_{i}.png"
        msk = tmp_path / f"msk_{i}.png"
        write_png(img, rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8))
        labels = rng.integers(0, 3, size=(8, 8))
        save_tile_png(render_mask(LabelMask(8, 8, labels), pal), msk)
        labeled.append({"image": img.name, "mask": msk.name, "meters_per_pixel": 0.5})
    for i in range(n_unlabeled):
        img = tmp_path / f"extra_{i}.png"
        write_png(img, rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8))
        unlabeled.append({"image": img.name})
    return labeled, unlabeled


class TestBuildSplit:
    def test_pseudo_train_unions_source_splits_in_order(self, tmp_path):
        labeled, unlabeled = make_dataset(tmp_path)
        doc = {
            "splits": {"val": labeled, "extra": unlabeled},
            "pseudo_train_from": ["val", "extra"],
        }
        mpath = tmp_path / "manifest.json"
        mpath.write_text(json.dumps(doc))
        manifest = build_split(mpath)
        assert len(manifest.split("val")) == 2
        assert len(manifest.pseudo_train) == 5
        assert all(e.mask is None for e in manifest.pseudo_train)
        expect_images = [str(tmp_path / d["image"]) for d in labeled + unlabeled]
        assert [e.image for e in manifest.split("pseudo_train")] == expect_images
        assert manifest.split("val")[0].meters_per_pixel == 0.5
        assert manifest.split("val")[0].mask is not None

    def test_empty_manifest_is_valid(self, tmp_path):
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps({"splits": {}}))
        manifest = build_split(mpath)
        assert manifest.splits == {} and manifest.pseudo_train == ()

    def test_all_missing_paths_reported_together(self, tmp_path):
        labeled, _ = make_dataset(tmp_path, n_labeled=1, n_unlabeled=0)
        doc = {
            "splits": {
                "train": labeled
                + [
                    {"image": "ghost_a.png"},
                    {"image": "ghost_b.png", "mask": "ghost_m.png"},
                ]
            }
        }
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps(doc))
        with pytest.raises(ManifestError) as exc:
            build_split(mpath)
        msg = str(exc.value)
        for name in ("ghost_a.png", "ghost_b.png", "ghost_m.png"):
            assert name in msg

    def test_mask_dims_must_match_image(self, tmp_path):
        rng = np.random.default_rng(9)
        write_png(tmp_path / "i.png", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8))
        pal = tiny_palette()
        save_tile_png(
            render_mask(LabelMask(4, 4, np.zeros((4, 4), dtype=np.int64)), pal),
            tmp_path / "m.png",
        )
        mpath = tmp_path / "manifest.json"
        mpath.write_text(
            json.dumps({"splits": {"t": [{"image": "i.png", "mask": "m.png"}]}})
        )
        with pytest.raises(DataError):
            build_split(mpath)

    def test_unknown_pseudo_source(self, tmp_path):
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps({"splits": {}, "pseudo_train_from": ["nope"]}))
        with pytest.raises(ManifestError):
            build_split(mpath)

    def test_unreadable_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            build_split(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("not json")
        with pytest.raises(FormatError):
            build_split(p)

    def test_malformed_entry(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"splits": {"t": [{"mask": "x.png"}]}}))
        with pytest.raises(FormatError):
            build_split(p)

    def test_missing_splits_key(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"files": []}))
        with pytest.raises(FormatError):
            build_split(p)

    def test_unknown_split_name_raises(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"splits": {}}))
        with pytest.raises(ManifestError):
            build_split(p).split("train")
