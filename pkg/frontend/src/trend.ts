// Rolling trend chart drawn onto a plain canvas: measurement polyline with
// its setpoint overlaid as a dashed horizontal line.

import type { Sample } from "./store";

export interface TrendScale {
    min: number;
    max: number;
}

/** Y-axis bounds covering samples and overlay with a small margin; a flat
 *  series still gets a non-degenerate band. */
export function computeScale(samples: Sample[], setpoint: number | null): TrendScale {
    const values = samples.map((s) => s.value);
    if (setpoint !== null) values.push(setpoint);
    if (values.length === 0) return { min: 0, max: 1 };
    let min = Math.min(...values);
    let max = Math.max(...values);
    if (max - min < 1e-9) {
        min -= 0.5;
        max += 0.5;
    }
    const margin = (max - min) * 0.1;
    return { min: min - margin, max: max + margin };
}

export function toPolyline(
    samples: Sample[],
    scale: TrendScale,
    width: number,
    height: number,
    windowS: number,
): [number, number][] {
    if (samples.length === 0) return [];
    const latest = samples[samples.length - 1].ts_ns;
    const t0 = latest - windowS * 1e9;
    const span = windowS * 1e9;
    return samples.map((s) => {
        const x = ((s.ts_ns - t0) / span) * width;
        const y = height - ((s.value - scale.min) / (scale.max - scale.min)) * height;
        return [x, y];
    });
}

export function drawTrend(
    canvas: HTMLCanvasElement,
    samples: Sample[],
    setpoint: number | null,
    windowS: number,
): void {
    const ctx = canvas.getContext("2d");
    if (!ctx) return; // jsdom canvases have no 2D context; data paths above stay testable
    const { width, height } = canvas;
    ctx.clearRect(0, 0, width, height);
    ctx.strokeStyle = "#2b3a4a";
    ctx.strokeRect(0.5, 0.5, width - 1, height - 1);
    if (samples.length === 0) return;

    const scale = computeScale(samples, setpoint);
    if (setpoint !== null) {
        const y = height - ((setpoint - scale.min) / (scale.max - scale.min)) * height;
        ctx.save();
        ctx.setLineDash([6, 4]);
        ctx.strokeStyle = "#c0392b";
        ctx.beginPath();
        ctx.moveTo(0, y);
        ctx.lineTo(width, y);
        ctx.stroke();
        ctx.restore();
    }
    const points = toPolyline(samples, scale, width, height, windowS);
    ctx.strokeStyle = "#27ae60";
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    points.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y)));
    ctx.stroke();
}
