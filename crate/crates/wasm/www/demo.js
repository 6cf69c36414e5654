// Built with: wasm-pack build crates/wasm --target web --out-dir www/pkg
import init, { frame_iq, complexity, rotation_trace } from "./pkg/rbnn_wasm.js";

const $ = (id) => document.getElementById(id);

function call(errorId, f) {
  $(errorId).textContent = "";
  try {
    return JSON.parse(f());
  } catch (e) {
    $(errorId).textContent = String(e);
    return null;
  }
}

function plotLines(canvas, series, colors) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const all = series.flat();
  const lo = Math.min(...all), hi = Math.max(...all);
  const span = hi - lo || 1;
  series.forEach((ys, k) => {
    ctx.strokeStyle = colors[k];
    ctx.beginPath();
    ys.forEach((y, i) => {
      const px = (i / Math.max(ys.length - 1, 1)) * (canvas.width - 10) + 5;
      const py = canvas.height - 5 - ((y - lo) / span) * (canvas.height - 10);
      i ? ctx.lineTo(px, py) : ctx.moveTo(px, py);
    });
    ctx.stroke();
  });
}

function drawFrame() {
  const snr = Number($("frame-snr").value);
  $("frame-snr-value").textContent = snr;
  const seed = BigInt($("frame-seed").value || 0);
  const f = call("frame-error", () => frame_iq($("frame-class").value, snr, seed, 0));
  if (!f) return;
  plotLines($("frame-time"), [f.i.slice(0, 256), f.q.slice(0, 256)], ["#1f77b4", "#d62728"]);

  const c = $("frame-iq");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const r = Math.max(...f.i.map(Math.abs), ...f.q.map(Math.abs)) || 1;
  ctx.fillStyle = "rgba(31,119,180,0.4)";
  for (let k = 0; k < f.i.length; k++) {
    const x = c.width / 2 + (f.i[k] / r) * (c.width / 2 - 4);
    const y = c.height / 2 - (f.q[k] / r) * (c.height / 2 - 4);
    ctx.fillRect(x, y, 2, 2);
  }
}

function showCost() {
  const rep = call("cost-error", () =>
    complexity($("cost-variant").value, Number($("cost-classes").value),
      Number($("cost-width").value), $("cost-bn").checked));
  if (!rep) return;
  const t = rep.totals;
  const rows = [
    ["parameters", rep.params.toLocaleString()],
    ["real FLOPs", t.flops.toExponential(3)],
    ["XNOR ops", t.xnor_ops.toExponential(3)],
    ["memory (MB)", rep.memory_mb.toFixed(4)],
  ];
  $("cost-table").innerHTML = rows.map(([k, v]) => `<tr><th>${k}</th><td>${v}</td></tr>`).join("");
}

function solveRotation() {
  const out = call("rot-error", () =>
    rotation_trace(Number($("rot-out").value), Number($("rot-in").value), BigInt($("rot-seed").value || 0)));
  if (!out) return;
  plotLines($("rot-plot"), [out.objectives], ["#2ca02c"]);
  $("rot-summary").textContent =
    `R1 ${out.n1}x${out.n1}, R2 ${out.n2}x${out.n2}; ${out.cycles} cycle(s); ` +
    `cos phi ${out.cos_phi_start.toFixed(4)} -> ${out.cos_phi_end.toFixed(4)}`;
}

await init();
for (const id of ["frame-class", "frame-snr", "frame-seed"]) $(id).addEventListener("input", drawFrame);
for (const id of ["cost-variant", "cost-classes", "cost-width", "cost-bn"]) $(id).addEventListener("input", showCost);
$("rot-run").addEventListener("click", solveRotation);
drawFrame();
showCost();
solveRotation();
