"""3D頭部アバターの逐次反転 - コマンドラインツール"""
import functools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List

import click
import torch

from src.evaluation import (
    ablation_suite, compute_metrics, cross_reenactment, frame_count_sweep, landmark_points, track_keypoints,
)
from src.pipeline import FrameObservation
from src.training import LOSS_LOG, LossLogger, run_stage, sample_synthetic_identity
from src.training.trainer import S2_VARIANTS, S3_VARIANTS, STAGES, checkpoint_name, load_stage
from src.utils.checkpoint import load_avatar, save_avatar, save_session
from src.utils.config import Config, load_config
from src.utils.data_parser import DataParser, FrameRecord
from src.utils.errors import AvatarError
from src.visualizer import ChartGenerator

logger = logging.getLogger(__name__)


@dataclass
class AppContext:
    config: Config
    out_dir: Path


def handle_errors(func):
    """ドメインエラーはトレースバックを出さずに終了コード1で終える"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (AvatarError, ValueError) as e:
            logger.error(str(e))
            click.echo(str(e), err=True)
            raise SystemExit(1)

    return wrapper


def frame_observations(manifest_path: Path, records: List[FrameRecord]) -> List[FrameObservation]:
    root = manifest_path.parent
    return [FrameObservation.single(DataParser.load_image(root / r.image), r.params, r.camera) for r in records]


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML設定ファイル [default: 組み込みの既定値]")
@click.option("--seed", type=int, default=None, help="乱数シード（設定値を上書き）")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/default", show_default=True,
              help="チェックポイント・レポートの出力先")
@click.option("-v", "--verbose", is_flag=True, help="デバッグログを表示")
@click.pass_context
def cli(ctx, config_path, seed, out_dir, verbose):
    """合成データ上で学習・評価する3D頭部アバターの反転ツール"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(config_path).with_seed(seed)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="--config")
    torch.manual_seed(config.seed)
    ctx.obj = AppContext(config, Path(out_dir))


@cli.command("synth-data")
@click.option("--identities", type=int, default=None, help="人物数 [default: evaluation.num_identities]")
@click.option("--split", type=click.Choice(["eval", "train"]), default="eval", show_default=True)
@click.pass_obj
@handle_errors
def synth_data(app: AppContext, identities, split):
    """学習済みの事前分布から合成動画（PNG + manifest.json）を書き出す"""
    config = app.config
    ev = config.evaluation
    inverter, _, _ = load_stage(config, app.out_dir, "prior")
    count = identities or ev.num_identities
    base = config.seed + (ev.seed_offset if split == "eval" else 0)
    length = ev.sequence_length
    roles = ["source" if i < ev.source_pool else "eval" if i >= length - ev.eval_frames else "driving"
             for i in range(length)]
    for i in range(count):
        sample = sample_synthetic_identity(inverter.generator, config, base + i, length)
        DataParser.write_sequence(
            app.out_dir / "data" / split / f"identity_{sample.seed:06d}",
            [f.image for f in sample.frames], [f.params for f in sample.frames],
            [f.camera for f in sample.frames], roles, meta={"seed": sample.seed, "split": split},
        )
    click.echo(f"{count} 人分の合成動画を書き出しました: {app.out_dir / 'data' / split}")


@cli.command()
@click.argument("stage", type=click.Choice(list(STAGES)))
@click.option("--variant", default="full", show_default=True,
              help=f"s2: {'/'.join(S2_VARIANTS)}、s3: {'/'.join(S3_VARIANTS)}")
@click.option("--no-progress", is_flag=True, help="進捗バーを表示しない")
@click.pass_obj
@handle_errors
def train(app: AppContext, stage, variant, no_progress):
    """ステージ単位で学習する（prior → s1 → s2 → s3）"""
    path = run_stage(app.config, stage, app.out_dir, variant, progress=not no_progress)
    click.echo(f"チェックポイントを保存しました: {path}")


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--one-shot", "mode", flag_value="one-shot", help="最初のソースフレームだけで反転")
@click.option("--stream", "mode", flag_value="stream", default=True, help="ソースフレームを逐次に畳み込む")
@click.option("--frames", "num_frames", type=click.IntRange(min=1), default=None, help="使うソースフレーム数 [default: 全部]")
@click.option("--output", type=click.Path(dir_okay=False), default=None, help="アバターの保存先")
@click.pass_obj
@handle_errors
def invert(app: AppContext, manifest, mode, num_frames, output):
    """マニフェストのソースフレームからアバターを反転する"""
    manifest = Path(manifest)
    sources = DataParser.load_frames(manifest, "source")
    if num_frames is not None:
        sources = sources[:num_frames]
    frames = frame_observations(manifest, sources)
    stage = "s2" if mode == "one-shot" else "s3"
    inverter, _, _ = load_stage(app.config, app.out_dir, stage)
    inverter.eval()
    output = Path(output) if output else app.out_dir / "avatars" / f"{manifest.parent.name}.pt"
    meta = {"manifest": str(manifest), "mode": mode, "frames": len(frames)}
    with torch.no_grad():
        if mode == "one-shot":
            avatar = inverter.invert_one_shot(frames[0])
        else:
            session = inverter.start_session(frames[0])
            for frame in frames:
                session = inverter.update_session(session, frame)
            avatar = inverter.session_avatar(session)
            save_session(output.with_suffix(".session.pt"), session, meta)
    save_avatar(output, avatar, meta)
    click.echo(f"アバターを保存しました: {output}")


@cli.command()
@click.argument("avatar_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--role", type=click.Choice(["eval", "driving", "source"]), default="eval", show_default=True)
@click.option("--stage", type=click.Choice(["s1", "s2", "s3"]), default="s3", show_default=True,
              help="ジェネレータを読み込むチェックポイント")
@click.pass_obj
@handle_errors
def animate(app: AppContext, avatar_path, manifest, role, stage):
    """保存したアバターをマニフェストの係数・カメラで駆動して描画する"""
    manifest = Path(manifest)
    records = DataParser.load_frames(manifest, role)
    if not records:
        raise click.UsageError(f"role '{role}' のフレームがありません")
    inverter, proxies, _ = load_stage(app.config, app.out_dir, stage)
    avatar = load_avatar(avatar_path)
    out_dir = app.out_dir / "animate" / Path(avatar_path).stem
    preds = []
    with torch.no_grad():
        for i, record in enumerate(records):
            rgb = inverter.animate(avatar, [record.params], [record.camera], record.camera.resolution).rgb
            DataParser.save_image(rgb, out_dir / f"{i:04d}.png")
            preds.append(rgb[0])
    pred = torch.stack(preds)
    target = torch.stack([DataParser.load_image(manifest.parent / r.image) for r in records])
    if target.shape == pred.shape:
        points = landmark_points(inverter.generator.face_model, [r.params for r in records],
                                 [r.camera for r in records], pred.shape[-1])
        report = compute_metrics(pred, target, proxies, landmarks=(track_keypoints(pred, target, points), points))
        DataParser.save_report(report.frames, out_dir / "metrics")
        click.echo(" ".join(f"{k}={v:.4f}" for k, v in report.aggregate.items()))
    click.echo(f"{len(records)} フレームを描画しました: {out_dir}")


@cli.command("eval")
@click.option("--frame-counts", default=None, help="カンマ区切りのソースフレーム数 [default: 設定値]")
@click.pass_obj
@handle_errors
def evaluate(app: AppContext, frame_counts):
    """フレーム数スイープ・別人物の再演・損失曲線のレポートを作る"""
    counts = [int(c) for c in frame_counts.split(",")] if frame_counts else None
    report_dir = app.out_dir / "reports"
    sweep = frame_count_sweep(app.config, app.out_dir, counts, progress=True)
    DataParser.save_report(sweep.set_index(["method", "frames"]), report_dir / "frame_sweep")
    ChartGenerator.save_html(ChartGenerator.plot_frame_sweep(sweep), report_dir / "frame_sweep.html")

    cross = cross_reenactment(app.config, app.out_dir)
    DataParser.save_report(cross.set_index(["source", "driver"]), report_dir / "cross_reenactment")

    losses = LossLogger(app.out_dir / LOSS_LOG).read()
    if not losses.empty:
        ChartGenerator.plot_loss_curves(losses, save_path=report_dir / "loss_curves.png")
    click.echo(sweep.to_string(index=False))


@cli.command()
@click.pass_obj
@handle_errors
def ablate(app: AppContext):
    """エンコーダ構成のアブレーション（full / wo_nt_enc / wo_both_enc / tri_offsets）"""
    missing = [checkpoint_name("s2", v) for v in S2_VARIANTS if not (app.out_dir / checkpoint_name("s2", v)).exists()]
    if missing:
        logger.warning(f"未学習のバリアントがあります: {', '.join(missing)}")
    table = ablation_suite(app.config, app.out_dir, progress=True)
    report_dir = app.out_dir / "reports"
    DataParser.save_report(table, report_dir / "ablation")
    ChartGenerator.plot_ablation_bars(table, save_path=report_dir / "ablation.png")
    click.echo(table.to_string())


if __name__ == "__main__":
    cli()
