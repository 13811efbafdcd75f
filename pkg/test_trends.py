"""学習を伴う傾向チェック（pytest -m slow）"""
import pytest
import torch

from src.evaluation.ablation import EvalSet, ablation_suite, evaluate_inverter, frame_count_sweep
from src.generator.types import LatentCode
from src.training.synthetic import sample_synthetic_identity
from src.training.trainer import LOSS_LOG, LossLogger, load_stage, run_stage
from src.utils.config import Config
from conftest import TINY

WINDOW = 4
FRAME_COUNTS = [1, 2, 4, 8, 32]


def smoke_config() -> Config:
    """4人物・固定窓4の短い学習スケジュール"""
    training = {**TINY["training"], "num_identities": 4, "frames_per_identity": 8}
    training["stage1"] = {**TINY["training"]["stage1"], "steps": 200, "lr": 1e-3}
    training["stage2"] = {**TINY["training"]["stage2"], "steps": 120, "lr": 1e-3}
    training["stage3"] = {**TINY["training"]["stage3"], "steps": 60, "lr": 1e-3, "max_sequence": 8}
    data = {
        **TINY,
        "encoders": {**TINY["encoders"], "fusion_window": WINDOW},
        "training": training,
        "evaluation": {"num_identities": 4, "sequence_length": 36, "source_pool": 32, "eval_frames": 4,
                       "frame_counts": FRAME_COUNTS},
    }
    return Config.from_dict(data)


@pytest.fixture(scope="module")
def long_run(tmp_path_factory):
    config = smoke_config()
    out_dir = tmp_path_factory.mktemp("long")
    for stage, variant in [("prior", "full"), ("s1", "full"), ("s2", "full"), ("s2", "wo_nt_enc"),
                           ("s2", "tri_offsets"), ("s3", "full"), ("s3", "convfusion")]:
        run_stage(config, stage, out_dir, variant, progress=False)
    return config, out_dir


@pytest.fixture(scope="module")
def eval_set(long_run):
    config, out_dir = long_run
    inverter, _, _ = load_stage(config, out_dir, "s1")
    return EvalSet.build(inverter.generator, config)


@pytest.fixture(scope="module")
def sweep(long_run, eval_set):
    config, out_dir = long_run
    return frame_count_sweep(config, out_dir, FRAME_COUNTS, methods=("recurrent", "convfusion"),
                             eval_set=eval_set)


def _first_last(df, stage, term="l1"):
    rows = df[(df["stage"] == stage) & (df["term"] == term)].sort_values("step")
    return rows["value"].head(10).mean(), rows["value"].tail(10).mean()


def _sweep_l1(sweep, method, frames):
    row = sweep[(sweep["method"] == method) & (sweep["frames"] == frames)]
    return float(row["l1"].iloc[0])


@pytest.mark.slow
def test_stage1_reconstruction_improves(long_run):
    _, out_dir = long_run
    first, last = _first_last(LossLogger(out_dir / LOSS_LOG).read(), "s1")
    assert last < first


@pytest.mark.slow
def test_stage1_loss_falls_below_seventy_percent(long_run):
    """敵対項を除いた合計損失（平滑化）が初期の7割を下回る"""
    config, out_dir = long_run
    df = LossLogger(out_dir / LOSS_LOG).read()
    table = df[df["stage"] == "s1"].pivot_table(index="step", columns="term", values="value")
    reconstruction = table["total"] - config.training.stage1.lambda_adv * table["adv_e"]
    assert reconstruction.tail(10).mean() < 0.7 * reconstruction.head(10).mean()


@pytest.mark.slow
def test_stage2_reconstruction_improves(long_run):
    _, out_dir = long_run
    first, last = _first_last(LossLogger(out_dir / LOSS_LOG).read(), "s2/full")
    assert last < first


@pytest.mark.slow
def test_encoded_latent_beats_mean_latent(long_run, eval_set):
    config, out_dir = long_run
    inverter, proxies, _ = load_stage(config, out_dir, "s1")
    inverter.eval()
    num_ws = config.generator.num_ws

    def mean_latent(inv, sample):
        return inv.coarse_avatar(LatentCode(inv.e_latent.w_avg.view(1, 1, -1).expand(1, num_ws, -1)))

    def encoded(inv, sample):
        return inv.coarse_avatar(inv.encode_latent(sample.observation(0).image))

    assert evaluate_inverter(inverter, proxies, eval_set, encoded)["l1"] < \
        evaluate_inverter(inverter, proxies, eval_set, mean_latent)["l1"]


@pytest.mark.slow
def test_refined_inversion_beats_coarse(long_run):
    """学習後は細かい段を加えた方が入力画像に近い"""
    config, out_dir = long_run
    inverter, _, _ = load_stage(config, out_dir, "s2")
    inverter.eval()
    coarse_error, refined_error = 0.0, 0.0
    for seed in range(3):
        sample = sample_synthetic_identity(inverter.generator, config, 500 + seed, 1)
        frame = sample.observation(0)
        with torch.no_grad():
            latent = inverter.encode_latent(frame.image)
            coarse = inverter.render_avatar(inverter.coarse_avatar(latent), frame.params, frame.cameras).render.rgb
            refined = inverter.animate(inverter.invert_one_shot(frame), frame.params, frame.cameras).rgb
        coarse_error += float((coarse - frame.image).abs().mean())
        refined_error += float((refined - frame.image).abs().mean())
    assert refined_error < coarse_error


@pytest.mark.slow
def test_more_source_frames_do_not_hurt_recurrent(sweep):
    assert _sweep_l1(sweep, "recurrent", 4) <= 1.02 * _sweep_l1(sweep, "recurrent", 1)
    assert _sweep_l1(sweep, "recurrent", 8) <= 1.02 * _sweep_l1(sweep, "recurrent", 2)


@pytest.mark.slow
def test_fixed_window_stops_improving(sweep):
    assert _sweep_l1(sweep, "recurrent", 32) <= _sweep_l1(sweep, "recurrent", WINDOW)
    assert _sweep_l1(sweep, "convfusion", 32) >= 0.98 * _sweep_l1(sweep, "convfusion", WINDOW)


@pytest.mark.slow
def test_ablation_ordering(long_run, eval_set):
    config, out_dir = long_run
    l1 = ablation_suite(config, out_dir, eval_set)["l1"]
    assert l1["full"] <= l1["wo_nt_enc"] <= l1["wo_both_enc"]
    assert l1["tri_offsets"] > l1["full"]
