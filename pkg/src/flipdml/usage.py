"""Engagement measures for the flipped cohort, computed from raw event logs.

Input tables (one CSV per channel, ISO-8601 UTC timestamps):

video catalog   ``video_id, n_segments, due``
video events    ``student_id, video_id, segment, timestamp``
quiz catalog    ``quiz_id, n_questions``
quiz attempts   ``student_id, quiz_id, answered[, points, submitted_at]``
clicker sessions       ``session_id, relevant``
clicker participation  ``student_id, session_id, answered``

A row in the clicker participation table means the student attended that
session.  Every measure is a product of a coverage share and the mean
completeness over the covered units, so it lies in [0, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

MEASURES = ("VD", "TV", "QP", "ACS")


def _utc(values) -> pd.Series:
    return pd.to_datetime(pd.Series(values), utc=True)


@dataclass
class VideoEventLog:
    catalog: pd.DataFrame
    events: pd.DataFrame
    exam_time: pd.Timestamp

    def __post_init__(self):
        self.catalog = self.catalog.assign(due=_utc(self.catalog["due"]).to_numpy())
        self.events = self.events.assign(timestamp=_utc(self.events["timestamp"]).to_numpy())
        self.exam_time = pd.Timestamp(self.exam_time)
        if self.exam_time.tzinfo is None:
            self.exam_time = self.exam_time.tz_localize("UTC")
        segs = self.catalog.set_index("video_id")["n_segments"]
        ev = self.events
        unknown = ~ev["video_id"].isin(segs.index)
        if unknown.any():
            raise ValueError(f"events reference unknown video {ev.loc[unknown, 'video_id'].iloc[0]!r}")
        bad = (ev["segment"] < 0) | (ev["segment"] >= ev["video_id"].map(segs))
        if bad.any():
            raise ValueError("segment index outside the video's segment count")


@dataclass
class QuizLog:
    catalog: pd.DataFrame
    attempts: pd.DataFrame

    def __post_init__(self):
        nq = self.attempts["quiz_id"].map(self.catalog.set_index("quiz_id")["n_questions"])
        if (self.attempts["answered"] > nq).any():
            raise ValueError("a quiz attempt answers more questions than the quiz has")


@dataclass
class ClickerLog:
    sessions: pd.DataFrame
    participation: pd.DataFrame


def _video_shares(video: VideoEventLog) -> pd.DataFrame:
    """Per (student, video): unique-segment shares before due time and before the exam."""
    ev = video.events.loc[video.events["timestamp"] < video.exam_time]
    if ev.empty:
        return pd.DataFrame(
            {"student_id": pd.Series(dtype=object), "video_id": pd.Series(dtype=object),
             "due_share": pd.Series(dtype=float), "total_share": pd.Series(dtype=float)}
        )
    cat = video.catalog.set_index("video_id")
    ev = ev.assign(due=ev["video_id"].map(cat["due"]).to_numpy())
    total = ev.drop_duplicates(["student_id", "video_id", "segment"])
    total = total.groupby(["student_id", "video_id"])["segment"].nunique().rename("n_total")
    timely = ev.loc[ev["timestamp"] <= ev["due"]].drop_duplicates(["student_id", "video_id", "segment"])
    timely = timely.groupby(["student_id", "video_id"])["segment"].nunique().rename("n_due")
    out = pd.concat([total, timely], axis=1).fillna(0).reset_index()
    segs = out["video_id"].map(cat["n_segments"]).astype(float)
    out["due_share"] = out["n_due"] / segs
    out["total_share"] = out["n_total"] / segs
    return out[["student_id", "video_id", "due_share", "total_share"]]


def compute_usage_measures(students, video: VideoEventLog, quiz: QuizLog, clicker: ClickerLog) -> pd.DataFrame:
    """VD, TV, QP and ACS for every student id in ``students``.

    Students missing from a log get zero engagement for that channel.
    Repeated events count once: segments by uniqueness, quizzes and clicker
    sessions by their best record.
    """
    students = pd.Index(pd.unique(pd.Series(list(students))), name="student_id")
    n_videos = len(video.catalog)
    if n_videos == 0:
        raise ValueError("video catalog is empty")

    shares = _video_shares(video)
    vg = shares.groupby("student_id")
    accessed = vg.size().reindex(students, fill_value=0)
    access_share = accessed / n_videos
    vd = (access_share * vg["due_share"].mean().reindex(students)).fillna(0.0)
    tv = (access_share * vg["total_share"].mean().reindex(students)).fillna(0.0)

    n_quiz = len(quiz.catalog)
    if n_quiz and len(quiz.attempts):
        nq = quiz.catalog.set_index("quiz_id")["n_questions"]
        att = quiz.attempts.assign(frac=(quiz.attempts["answered"] / quiz.attempts["quiz_id"].map(nq)).clip(0, 1))
        best = att.groupby(["student_id", "quiz_id"])["frac"].max().reset_index()
        qg = best.groupby("student_id")["frac"]
        qp = (qg.size().reindex(students, fill_value=0) / n_quiz * qg.mean().reindex(students)).fillna(0.0)
    else:
        qp = pd.Series(0.0, index=students)

    n_sess = len(clicker.sessions)
    if n_sess and len(clicker.participation):
        rel = clicker.sessions.set_index("session_id")["relevant"]
        part = clicker.participation
        frac = (part["answered"] / part["session_id"].map(rel)).clip(0, 1).fillna(0.0)
        best = part.assign(frac=frac).groupby(["student_id", "session_id"])["frac"].max().reset_index()
        cg = best.groupby("student_id")["frac"]
        acs = (cg.size().reindex(students, fill_value=0) / n_sess * cg.mean().reindex(students)).fillna(0.0)
    else:
        acs = pd.Series(0.0, index=students)

    out = pd.DataFrame({"VD": vd, "TV": tv, "QP": qp, "ACS": acs}, index=students)
    return out.clip(0.0, 1.0).reset_index()


def quartile_cutoffs(points) -> np.ndarray:
    """Exam-point cutoffs at the 25/50/75% order statistics (inverted CDF)."""
    return np.quantile(np.asarray(points, dtype=float), [0.25, 0.5, 0.75], method="inverted_cdf")


def assign_quartiles(points, cutoffs=None) -> np.ndarray:
    """Quartile label 1..4; a score equal to a cutoff belongs to the lower quartile."""
    points = np.asarray(points, dtype=float)
    cutoffs = quartile_cutoffs(points) if cutoffs is None else np.asarray(cutoffs, dtype=float)
    return np.searchsorted(cutoffs, points, side="left") + 1


def quartile_summary(records: pd.DataFrame, points_col: str = "exam_points", cutoffs=None) -> pd.DataFrame:
    """Mean, median, min and max of every usage measure by exam-point quartile."""
    if len(records) < 4:
        raise ValueError("need at least four students for a quartile summary")
    pts = records[points_col].to_numpy(dtype=float)
    if np.unique(pts).size == 1:
        warnings.warn("all exam points are equal; reporting a single group", RuntimeWarning, stacklevel=2)
        q = np.ones(len(pts), dtype=int)
    else:
        q = assign_quartiles(pts, cutoffs)
    df = records.assign(quartile=q)
    rows = []
    for quart, g in df.groupby("quartile"):
        for m in MEASURES:
            v = g[m]
            rows.append(
                {
                    "quartile": int(quart),
                    "n": len(g),
                    "points_min": g[points_col].min(),
                    "points_max": g[points_col].max(),
                    "measure": m,
                    "mean": v.mean(),
                    "median": v.median(),
                    "min": v.min(),
                    "max": v.max(),
                }
            )
    return pd.DataFrame(rows)


def access_vs_usage(students, video: VideoEventLog) -> tuple[pd.DataFrame, dict]:
    """Access counts against access x mean in-time share and access x mean total share.

    Returns the per-student series and their Pearson correlations with the
    access count (NaN where a series is constant).
    """
    students = pd.Index(pd.unique(pd.Series(list(students))), name="student_id")
    shares = _video_shares(video)
    g = shares.groupby("student_id")
    accessed = g.size().reindex(students, fill_value=0).astype(float)
    due = (accessed * g["due_share"].mean().reindex(students)).fillna(0.0)
    tot = (accessed * g["total_share"].mean().reindex(students)).fillna(0.0)
    series = pd.DataFrame({"accessed": accessed, "due_series": due, "total_series": tot}).reset_index()

    def corr(a, b):
        if np.std(a) == 0 or np.std(b) == 0:
            return float("nan")
        return float(np.corrcoef(a, b)[0, 1])

    cors = {
        "due": corr(series["accessed"], series["due_series"]),
        "total": corr(series["accessed"], series["total_series"]),
    }
    return series, cors


def read_usage_logs(paths: dict, base_dir=".") -> tuple[VideoEventLog, QuizLog, ClickerLog]:
    from pathlib import Path

    base = Path(base_dir)
    rd = lambda key: pd.read_csv(base / paths[key])  # noqa: E731
    video = VideoEventLog(rd("video_catalog"), rd("video_events"), pd.Timestamp(paths["exam_time"]))
    quiz = QuizLog(rd("quiz_catalog"), rd("quiz_attempts"))
    clicker = ClickerLog(rd("clicker_sessions"), rd("clicker_participation"))
    return video, quiz, clicker
