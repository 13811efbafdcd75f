"""グラフ生成・可視化"""
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

logger = logging.getLogger(__name__)

METHOD_LABELS = {"recurrent": "ConvGRU（逐次）", "convfusion": "ConvFusion（固定窓）", "average": "特徴平均"}


class ChartGenerator:
    """グラフ生成クラス"""

    @staticmethod
    def smooth(values: pd.Series, window: int) -> pd.Series:
        """移動平均（window ≤ 1 ならそのまま）"""
        if window <= 1:
            return values
        return values.rolling(window, min_periods=1).mean()

    @staticmethod
    def plot_loss_curves(
        loss_df: pd.DataFrame,
        terms: Optional[Sequence[str]] = None,
        smooth_window: int = 5,
        title: str = "学習損失の推移",
        figsize: Tuple[int, int] = (12, 6),
        save_path: Optional[Path] = None
    ) -> plt.Figure:
        """ステージごとの損失曲線をmatplotlibで描画

        Args:
            loss_df: 損失ログ（列: step, stage, term, value）
            terms: 描画する項（Noneなら total のみ）
            smooth_window: 移動平均の幅
            title: グラフタイトル
            figsize: 図のサイズ
            save_path: 保存先パス（Noneの場合は保存しない）

        Returns:
            Figureオブジェクト
        """
        terms = list(terms or ["total"])
        stages = list(dict.fromkeys(loss_df["stage"])) if not loss_df.empty else []
        fig, axes = plt.subplots(1, max(1, len(stages)), figsize=figsize, squeeze=False)

        for ax, stage in zip(axes[0], stages):
            stage_df = loss_df[loss_df["stage"] == stage]
            for term in terms:
                series = stage_df[stage_df["term"] == term].sort_values("step")
                if series.empty:
                    continue
                ax.plot(series["step"], ChartGenerator.smooth(series["value"], smooth_window), label=term)
            ax.set_title(stage, fontsize=12)
            ax.set_xlabel("ステップ")
            ax.set_ylabel("損失")
            ax.grid(True, alpha=0.3)
            ax.legend()

        if not stages:
            axes[0][0].text(0.5, 0.5, "損失ログがありません", ha="center", va="center")
        fig.suptitle(title, fontsize=14, fontweight="bold")
        plt.tight_layout()

        if save_path:
            fig.savefig(save_path, dpi=150, bbox_inches="tight")
            logger.info(f"グラフを保存しました: {save_path}")

        return fig

    @staticmethod
    def plot_ablation_bars(
        ablation_df: pd.DataFrame,
        metric: str = "l1",
        title: str = "エンコーダ構成のアブレーション",
        figsize: Tuple[int, int] = (8, 5),
        save_path: Optional[Path] = None
    ) -> plt.Figure:
        """アブレーション結果を棒グラフで描画

        Args:
            ablation_df: variant を索引とする指標表
            metric: 描画する指標
            title: グラフタイトル
            figsize: 図のサイズ
            save_path: 保存先パス

        Returns:
            Figureオブジェクト
        """
        if metric not in ablation_df.columns:
            raise ValueError(f"エラー: 指標 '{metric}' がアブレーション表にありません")
        fig, ax = plt.subplots(figsize=figsize)
        values = ablation_df[metric]
        bars = ax.bar(values.index.astype(str), values.values, color="steelblue", alpha=0.8)
        for bar, value in zip(bars, values.values):
            ax.annotate(f"{value:.4f}", xy=(bar.get_x() + bar.get_width() / 2, bar.get_height()),
                        xytext=(0, 4), textcoords="offset points", ha="center", fontsize=9)
        ax.set_ylabel(metric, fontsize=12)
        ax.set_title(title, fontsize=14, fontweight="bold")
        ax.grid(True, axis="y", alpha=0.3)
        plt.tight_layout()

        if save_path:
            fig.savefig(save_path, dpi=150, bbox_inches="tight")
            logger.info(f"グラフを保存しました: {save_path}")

        return fig

    @staticmethod
    def plot_frame_sweep(
        sweep_df: pd.DataFrame,
        metric: str = "l1",
        title: str = "ソースフレーム数と再構成誤差"
    ) -> go.Figure:
        """フレーム数スイープをPlotlyで描画（インタラクティブ）

        Args:
            sweep_df: 列 method, frames, 指標, update_ms のDataFrame
            metric: 縦軸の指標
            title: グラフタイトル

        Returns:
            Plotly Figureオブジェクト
        """
        df = sweep_df.copy()
        df["method_label"] = df["method"].map(lambda m: METHOD_LABELS.get(m, m))
        fig = px.line(
            df,
            x="frames",
            y=metric,
            color="method_label",
            markers=True,
            hover_data=["update_ms"],
            title=title,
            labels={"frames": "ソースフレーム数", metric: metric, "method_label": "集約方式",
                    "update_ms": "更新時間 (ms/フレーム)"},
        )
        fig.update_xaxes(type="log", tickvals=sorted(df["frames"].unique()))
        fig.update_layout(hovermode="x unified", height=500, template="plotly_white")
        return fig

    @staticmethod
    def save_html(fig: go.Figure, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.write_html(str(path), include_plotlyjs="cdn")
        logger.info(f"グラフを保存しました: {path}")
        return path
