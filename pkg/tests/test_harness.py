import math

import numpy as np
import pytest

from dcqe import harness
from dcqe.codec import CodecConfig, encode_decode
from dcqe.config import BUNDLED
from dcqe.harness import CycleSpec, EnhanceOperator, run_cycles, run_experiment
from dcqe.imageio import ImageBuffer, load, save
from dcqe.metrics import psnr, ssim
from dcqe.models import ModelSpec, init_params, save_checkpoint

TEST_SET = BUNDLED["desk:test"]


@pytest.fixture(scope="module")
def image():
    return load(sorted(TEST_SET.glob("*.pgm"))[0])


def test_identity_cycling_is_flat(image):
    rep = run_cycles(image, CodecConfig(40), CycleSpec((EnhanceOperator.identity(),)))
    vals = rep.series["psnr"].values
    assert len(vals) == 6 and len(set(vals)) == 1
    assert rep.di == {"psnr": 0.0, "ssim": 0.0}
    assert rep.trace == ["identity"] * 5


def test_cycle_zero_is_bare_codec(image):
    rep = run_cycles(image, CodecConfig(30), CycleSpec((EnhanceOperator.builtin("b", "box", size=3),), cycles=2))
    bare = encode_decode(image, CodecConfig(30))
    assert rep.series["psnr"].values[0] == psnr(bare, image)
    assert rep.series["ssim"].values[0] == ssim(bare, image)


def test_box_blur_strictly_degrades_dataset_mean():
    # a smooth crop can gain from the first blur (it removes block noise);
    # the dataset-mean series must still fall at every cycle
    op = EnhanceOperator.builtin("box3", "box", size=3)
    rep = run_experiment(TEST_SET, [op], [CodecConfig(40)], metrics=("psnr",))
    vals = rep.summary[0].series
    assert len(vals) == 6
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_builtin_filters_preserve_shape():
    img = ImageBuffer(np.random.default_rng(0).random((12, 10, 3)))
    for op in harness.degrading_pool() + [EnhanceOperator.identity()]:
        assert op(img).shape == img.shape


def test_filters_fix_constants():
    img = np.full((6, 6, 1), 0.4)
    for fn in (harness.box_blur, harness.gaussian_blur, harness.median3, harness.unsharp):
        np.testing.assert_allclose(fn(img), img, atol=1e-15)


def test_model_operator_from_checkpoint(tmp_path, image):
    spec = ModelSpec.dncnn_like(depth=3, width=4)
    params = init_params(spec, 0)
    save_checkpoint(tmp_path / "m.ckpt", spec, params)
    a = EnhanceOperator.from_checkpoint(tmp_path / "m.ckpt")(image)
    b = EnhanceOperator.from_params("m", spec, params)(image)
    assert a.shape == image.shape and a == b


def test_operator_failure_truncates(image):
    class Boom(EnhanceOperator):
        calls = 0

        def __call__(self, img):
            Boom.calls += 1
            if Boom.calls == 3:
                raise RuntimeError("device lost")
            return img

    rep = run_cycles(image, CodecConfig(40), CycleSpec((Boom("boom"),), metrics=("psnr",)))
    assert rep.cycles == 2 and len(rep.series["psnr"].values) == 3
    assert "cycle 3" in rep.error and "device lost" in rep.error


def test_shape_changing_operator_is_a_failure(image):
    crop = EnhanceOperator("crop")
    crop.__class__ = type("Crop", (EnhanceOperator,), {"__call__": lambda self, img: ImageBuffer(img.samples[1:])})
    rep = run_cycles(image, CodecConfig(40), CycleSpec((crop,), metrics=("psnr",)))
    assert rep.cycles == 0 and "shape" in rep.error


def test_clamping_keeps_intermediates_in_range(image):
    seen = []

    class Spy(EnhanceOperator):
        def __call__(self, img):
            seen.append(img.samples.copy())
            return ImageBuffer(img.samples * 1.5 - 0.2)

    run_cycles(image, CodecConfig(40), CycleSpec((Spy("spy"),), metrics=("psnr",)))
    assert all(s.min() >= 0 and s.max() <= 1 for s in seen)


@pytest.mark.parametrize("kwargs", [dict(cycles=0), dict(case="random"), dict(operators=()),
                                    dict(case="vary_method"), dict(metrics=("fid",))])
def test_invalid_cycle_specs(kwargs):
    base = dict(operators=(EnhanceOperator.identity(),))
    base.update(kwargs)
    with pytest.raises(ValueError):
        CycleSpec(**base)


def test_draw_rule_and_replay():
    pool = tuple(harness.degrading_pool())
    spec = CycleSpec(pool, cycles=3, case="vary_method", seed=4)
    assert spec.draw_rule == "without_replacement"
    picks = harness.choose_operators(spec, 7)
    assert len(set(picks)) == 3 and picks == harness.choose_operators(spec, 7)
    spec5 = CycleSpec(pool, cycles=5, case="vary_method", seed=4)
    assert spec5.draw_rule == "with_replacement" and len(harness.choose_operators(spec5, 0)) == 5


def test_case3_draws_codec_per_image(image):
    pool = tuple(harness.degrading_pool())
    codecs = (CodecConfig(20), CodecConfig(40), CodecConfig(60))
    spec = CycleSpec(pool, case="vary_method_and_codec", codecs=codecs, seed=1, metrics=("psnr",))
    labels = {run_cycles(image, codecs[0], spec, i).codec for i in range(12)}
    assert len(labels) > 1


@pytest.fixture(scope="module")
def case_reports():
    pool = harness.degrading_pool()
    codecs = [CodecConfig(40)]
    return {case: run_experiment(TEST_SET, pool, codecs, case=case, metrics=("psnr",), seed=0)
            for case in ("same_method", "vary_method")}


def test_diverse_case_degrades_less(case_reports):
    assert case_reports["vary_method"].mean_di("vary_method") <= case_reports["same_method"].mean_di("same_method")


def test_experiment_identity_all_zero():
    rep = run_experiment(TEST_SET, [EnhanceOperator.identity()], [CodecConfig(40), CodecConfig(60)])
    assert {r.di for r in rep.summary} == {0.0}
    assert all(r.images == 10 for r in rep.summary)


def test_experiment_deterministic_and_worker_independent():
    pool = harness.degrading_pool()
    kw = dict(case="vary_method", metrics=("psnr",), seed=3)
    a = run_experiment(TEST_SET, pool, [CodecConfig(40)], **kw)
    b = run_experiment(TEST_SET, pool, [CodecConfig(40)], workers=2, **kw)
    assert harness.rows_csv(a.rows) == harness.rows_csv(b.rows)
    assert harness.summary_csv(a.summary) == harness.summary_csv(b.summary)


def test_unreadable_images_skipped(tmp_path, image):
    save(image, tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"junk")
    rep = run_experiment(tmp_path, [EnhanceOperator.identity()], [CodecConfig(40)], metrics=("psnr",))
    assert len(rep.skipped) == 1 and rep.summary[0].images == 1
    (tmp_path / "a.pgm").unlink()
    with pytest.raises(ValueError, match="no readable"):
        run_experiment(tmp_path, [EnhanceOperator.identity()], [CodecConfig(40)])


def test_csv_outputs_round_trip(tmp_path, case_reports):
    rep = case_reports["same_method"]
    rows_path, summary_path = harness.write_experiment(rep, tmp_path)
    header = rows_path.read_text().splitlines()[0].split(",")
    assert header == list(harness.ROW_FIELDS)
    back = harness.read_summary(summary_path)
    assert [(r.method, r.codec, r.metric) for r in back] == [(r.method, r.codec, r.metric) for r in rep.summary]
    assert all(a.di == pytest.approx(b.di, rel=1e-15) for a, b in zip(back, rep.summary))


def test_inf_serialized_as_text():
    assert harness.fmt_value(math.inf) == "inf"


def test_render_table_has_average_row(case_reports):
    text = harness.render_table(case_reports["same_method"].summary, "psnr")
    assert "Ave." in text and "box3" in text
