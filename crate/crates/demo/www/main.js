import init, { log_propensities, power_consumption, mean_wealth } from "./pkg/hypermerton_demo.js";

const COLORS = ["#1f77b4", "#d62728", "#2ca02c"];
const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function split(flat, series) {
  const n = flat.length / (series + 1);
  const out = [];
  for (let k = 0; k <= series; k++) out.push(Array.from(flat.slice(k * n, (k + 1) * n)));
  return out;
}

function plot(canvas, xs, ys, names) {
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 48;
  ctx.clearRect(0, 0, w, h);
  const finite = ys.flat().filter(Number.isFinite);
  let lo = Math.min(...finite), hi = Math.max(...finite);
  if (hi - lo < 1e-12) { lo -= 0.5; hi += 0.5; }
  const x0 = xs[0], x1 = xs[xs.length - 1];
  const sx = (x) => pad + (w - 2 * pad) * (x - x0) / (x1 - x0);
  const sy = (y) => h - pad - (h - 2 * pad) * (y - lo) / (hi - lo);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#333";
  ctx.font = "12px sans-serif";
  ctx.fillText(hi.toPrecision(4), 4, pad + 4);
  ctx.fillText(lo.toPrecision(4), 4, h - pad);
  ctx.fillText(String(x0), pad, h - pad + 16);
  ctx.fillText(String(x1), w - pad - 20, h - pad + 16);
  ys.forEach((series, k) => {
    ctx.strokeStyle = COLORS[k % COLORS.length];
    ctx.lineWidth = 2;
    ctx.setLineDash(k === 2 ? [6, 4] : []);
    ctx.beginPath();
    let started = false;
    series.forEach((y, i) => {
      if (!Number.isFinite(y)) return;
      if (started) ctx.lineTo(sx(xs[i]), sy(y));
      else { ctx.moveTo(sx(xs[i]), sy(y)); started = true; }
    });
    ctx.stroke();
    ctx.fillStyle = COLORS[k % COLORS.length];
    ctx.fillText(names[k], pad + 10 + 130 * k, pad - 10);
  });
  ctx.setLineDash([]);
}

function guarded(fn) {
  return () => {
    $("status").textContent = "";
    $("status").className = "";
    try {
      const t0 = performance.now();
      fn();
      $("status").textContent = `done in ${(performance.now() - t0).toFixed(0)} ms`;
    } catch (e) {
      $("status").textContent = String(e.message ?? e);
      $("status").className = "err";
    }
  };
}

const AGENTS = ["pre-commitment", "naive", "sophisticated"];

function runLog() {
  const flat = log_propensities($("kind").value, num("r1"), num("r2"), num("a"), num("horizon"), 201);
  const [t, ...ys] = split(flat, 3);
  plot($("log-plot"), t, ys, AGENTS);
}

function runPower() {
  const flat = power_consumption($("kind").value, num("r1"), num("r2"), num("gamma"),
    num("mu0"), num("mu"), num("sigma"), num("horizon"), 201);
  const [t, ...ys] = split(flat, 3);
  plot($("power-plot"), t, ys, AGENTS);
}

function runMc() {
  const flat = mean_wealth($("kind").value, num("r1"), num("r2"), num("horizon"),
    num("paths"), num("steps"), BigInt(num("seed")));
  const [t, ...ys] = split(flat, 2);
  plot($("mc-plot"), t, ys, ["naive", "pre-commitment"]);
}

await init();
$("run-log").onclick = guarded(runLog);
$("run-power").onclick = guarded(runPower);
$("run-mc").onclick = guarded(runMc);
guarded(runLog)();
guarded(runPower)();
