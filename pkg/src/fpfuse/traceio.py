"""Sensor trace container and its JSON Lines file format.

One record per line, ordered by time::

    {"t": 0.0, "kind": "meta", "trace_id": "walk-000", "meta": {...}}
    {"t": 0.05, "kind": "imu", "gyro": [wx, wy, wz], "accel": [fx, fy, fz]}
    {"t": 0.05, "kind": "mag", "mag": [mx, my, mz]}
    {"t": 2.0, "kind": "rss", "readings": {"ap00": -61.5, "ap03": -77.0}}
    {"t": 0.0, "kind": "anchor", "p": [x, y], "sigma": 1.5}

Units: rad/s, m/s^2, Gauss, dBm, meters, seconds.  Unknown kinds are ignored on
read.  Floats are written with ``repr`` precision so a read/write cycle is exact.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from fpfuse.crowdsourcing import Anchor
from fpfuse.dead_reckoning import ImuArrays, euler_from_dcm
from fpfuse.mapping import RssObservation, atomic_write_text

_KIND_ORDER = {"meta": 0, "anchor": 1, "imu": 2, "mag": 3, "rss": 4}


@dataclass
class SensorTrace:
    trace_id: str
    imu: ImuArrays
    rss: list[RssObservation] = field(default_factory=list)
    anchors: list[Anchor] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return float(self.imu.t[-1] - self.imu.t[0])

    def records(self) -> list[dict]:
        t0 = float(self.imu.t[0])
        recs: list[tuple[float, int, int, dict]] = []
        recs.append((t0, 0, 0, {"t": t0, "kind": "meta", "trace_id": self.trace_id, "meta": self.meta}))
        for i, a in enumerate(self.anchors):
            recs.append((a.t, 1, i, {"t": float(a.t), "kind": "anchor", "p": [float(a.p[0]), float(a.p[1])],
                                     "sigma": float(a.sigma)}))
        imu = self.imu
        for k in range(len(imu)):
            t = float(imu.t[k])
            recs.append((t, 2, k, {"t": t, "kind": "imu", "gyro": imu.gyro[k].tolist(),
                                   "accel": imu.accel[k].tolist()}))
            recs.append((t, 3, k, {"t": t, "kind": "mag", "mag": imu.mag[k].tolist()}))
        for i, o in enumerate(self.rss):
            recs.append((o.t, 4, i, {"t": float(o.t), "kind": "rss",
                                     "readings": {ap: float(r) for ap, r in sorted(o.readings.items())}}))
        recs.sort(key=lambda r: (r[0], r[1], r[2]))
        return [r[3] for r in recs]

    def dumps(self) -> str:
        buf = io.StringIO()
        for rec in self.records():
            buf.write(json.dumps(rec, separators=(",", ":"), sort_keys=True))
            buf.write("\n")
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def loads(cls, text: str, trace_id: str = "") -> "SensorTrace":
        imu_t, gyro, accel = [], [], []
        mag_t, mag = [], []
        rss, anchors = [], []
        meta: dict = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                kind = rec["kind"]
                t = float(rec["t"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"malformed trace record on line {ln}: {exc}") from None
            if kind == "imu":
                imu_t.append(t)
                gyro.append(rec["gyro"])
                accel.append(rec["accel"])
            elif kind == "mag":
                mag_t.append(t)
                mag.append(rec["mag"])
            elif kind == "rss":
                rss.append(RssObservation(t, {str(k): float(v) for k, v in rec["readings"].items()}))
            elif kind == "anchor":
                anchors.append(Anchor(t, (float(rec["p"][0]), float(rec["p"][1])), float(rec["sigma"])))
            elif kind == "meta":
                trace_id = rec.get("trace_id", trace_id)
                meta = rec.get("meta", {})
        if not imu_t:
            raise ValueError("trace has no IMU records")
        t = np.asarray(imu_t, dtype=float)
        if mag_t:
            mt = np.asarray(mag_t, dtype=float)
            # zero-order hold of the latest field sample at each IMU epoch
            j = np.clip(np.searchsorted(mt, t, side="right") - 1, 0, len(mt) - 1)
            m = np.asarray(mag, dtype=float)[j]
        else:
            m = np.zeros((len(t), 3))
        imu = ImuArrays(t, np.asarray(gyro, dtype=float), np.asarray(accel, dtype=float), m)
        return cls(trace_id, imu, rss, anchors, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SensorTrace":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read(), trace_id=os.path.splitext(os.path.basename(os.fspath(path)))[0])


TRUTH_COLUMNS = ("t", "x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw")


@dataclass
class GroundTruth:
    """True kinematics at every IMU epoch plus the true AP parameters."""

    t: NDArray[np.float64]
    p: NDArray[np.float64]
    v: NDArray[np.float64]
    C_bn: NDArray[np.float64]
    aps: dict = field(default_factory=dict)
    rss_outlier: list[bool] = field(default_factory=list)
    rss_position: NDArray | None = None

    def position_at(self, t) -> NDArray[np.float64]:
        """Linearly interpolated horizontal position at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.column_stack([np.interp(t, self.t, self.p[:, 0]), np.interp(t, self.t, self.p[:, 1])])

    def to_csv(self, manifest: str | None = None) -> str:
        buf = io.StringIO()
        if manifest:
            buf.write(f"# manifest: {manifest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for k in range(len(self.t)):
            r, p, y = euler_from_dcm(self.C_bn[k])
            w.writerow([repr(float(v)) for v in (self.t[k], *self.p[k], *self.v[k], r, p, y)])
        return buf.getvalue()

    def save_csv(self, path: str | os.PathLike, manifest: str | None = None) -> None:
        atomic_write_text(path, self.to_csv(manifest))

    @classmethod
    def load_csv(cls, path: str | os.PathLike) -> "GroundTruth":
        from fpfuse.dead_reckoning import dcm_from_euler

        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
        if not lines or lines[0].strip().split(",") != list(TRUTH_COLUMNS):
            raise ValueError(f"{os.fspath(path)} is not a ground-truth CSV")
        arr = np.loadtxt(lines[1:], delimiter=",", ndmin=2) if len(lines) > 1 else np.zeros((0, len(TRUTH_COLUMNS)))
        C = np.stack([dcm_from_euler(*row[7:10]) for row in arr]) if len(arr) else np.zeros((0, 3, 3))
        return cls(arr[:, 0], arr[:, 1:4], arr[:, 4:7], C)
