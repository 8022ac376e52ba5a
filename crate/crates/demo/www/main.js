import init, { appendix_c_curve, project_bag, perturbed_scatter } from "./pkg/llpcs_demo.js";

const $ = (id) => document.getElementById(id);

function axes(ctx, w, h, pad) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#888";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
}

function drawCurve() {
  const pts = JSON.parse(appendix_c_curve(+$("c-max").value, +$("c-bags").value, +$("c-seed").value));
  const cv = $("c-plot");
  const ctx = cv.getContext("2d");
  const pad = 40;
  axes(ctx, cv.width, cv.height, pad);
  const xs = pts.map((p) => Math.log2(p.k));
  const all = pts.flatMap((p) => [p.bag_loss, p.instance_loss, 1 / (12 * p.k)]).map(Math.log10);
  const lo = Math.min(...all), hi = Math.max(...all);
  const X = (x) => pad + (x / Math.max(...xs, 1)) * (cv.width - 2 * pad);
  const Y = (v) => cv.height - pad - ((Math.log10(v) - lo) / (hi - lo || 1)) * (cv.height - 2 * pad);
  const series = [
    ["instance loss", "#1f77b4", (p) => p.instance_loss],
    ["bag loss", "#d62728", (p) => p.bag_loss],
    ["1/(12k)", "#999", (p) => 1 / (12 * p.k)],
  ];
  series.forEach(([name, color, f], i) => {
    ctx.strokeStyle = color;
    ctx.fillStyle = color;
    ctx.beginPath();
    pts.forEach((p, j) => (j ? ctx.lineTo : ctx.moveTo).call(ctx, X(xs[j]), Y(f(p))));
    ctx.stroke();
    ctx.fillText(name, cv.width - pad - 90, pad + 14 * i);
  });
  ctx.fillStyle = "#444";
  ctx.fillText("log₂ k", cv.width / 2, cv.height - 10);
  ctx.fillText("log loss", 4, pad - 10);
}

function runProjection() {
  const preds = $("p-preds").value.split(",").map((s) => parseFloat(s)).filter((v) => !Number.isNaN(v));
  try {
    const out = project_bag(new Float64Array(preds), +$("p-label").value);
    const mean = out.reduce((a, b) => a + b, 0) / out.length;
    $("p-out").textContent = `projected: [${Array.from(out, (v) => v.toFixed(4)).join(", ")}]\nmean: ${mean.toFixed(6)}`;
  } catch (e) {
    $("p-out").textContent = String(e);
  }
}

function drawScatter() {
  const n = 300;
  const v = perturbed_scatter(+$("s-eps").value, +$("s-delta").value, n, +$("s-seed").value);
  const cv = $("s-plot");
  const ctx = cv.getContext("2d");
  const pad = 30;
  axes(ctx, cv.width, cv.height, pad);
  const xs = [...v.slice(0, n), ...v.slice(2 * n, 3 * n)];
  const ys = [...v.slice(n, 2 * n), ...v.slice(3 * n)];
  const [x0, x1, y0, y1] = [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
  const X = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (cv.width - 2 * pad);
  const Y = (y) => cv.height - pad - ((y - y0) / (y1 - y0 || 1)) * (cv.height - 2 * pad);
  [["#1f77b4", 0], ["#d62728", 2 * n]].forEach(([color, off]) => {
    ctx.fillStyle = color;
    for (let i = 0; i < n; i++) ctx.fillRect(X(v[off + i]) - 1.5, Y(v[off + n + i]) - 1.5, 3, 3);
  });
  ctx.fillStyle = "#1f77b4";
  ctx.fillText("source", cv.width - 80, pad);
  ctx.fillStyle = "#d62728";
  ctx.fillText("target", cv.width - 80, pad + 14);
}

await init();
$("c-run").addEventListener("click", drawCurve);
$("p-run").addEventListener("click", runProjection);
["s-eps", "s-delta", "s-seed"].forEach((id) => $(id).addEventListener("input", drawScatter));
drawCurve();
runProjection();
drawScatter();
