import init, { regionMasks, scheduleTimesteps, toyEdit, defaultAlpha0 } from "./pkg/moveact_web.js";

const OBJECT = [0.125, 0.5, 0.375, 0.75];
const SIZE = 64;
const COLOURS = [[60, 60, 60], [230, 80, 80], [240, 200, 60], [80, 160, 240]];

let target = [0.5, 0.5, 0.875, 0.875];
let input = null;

const $ = (id) => document.getElementById(id);
const status = (text) => { $("status").textContent = text; };

function paint(canvas, rgba, size) {
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
}

function drawScene() {
  const canvas = $("scene");
  if (input) paint(canvas, input, SIZE);
  const ctx = canvas.getContext("2d");
  ctx.strokeStyle = "#4af";
  ctx.lineWidth = 1;
  const [x0, y0, x1, y1] = target.map((v) => v * SIZE);
  ctx.strokeRect(x0 + 0.5, y0 + 0.5, x1 - x0 - 1, y1 - y0 - 1);
}

function drawMasks(masks) {
  const n = masks.size;
  const labels = masks.labels;
  const rgba = new Uint8Array(n * n * 4);
  labels.forEach((label, i) => {
    const [r, g, b] = COLOURS[label];
    rgba.set([r, g, b, 255], i * 4);
  });
  const canvas = $("masks");
  canvas.width = n;
  canvas.height = n;
  paint(canvas, rgba, n);
}

function drawCurve(series) {
  const canvas = $("curve");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const all = series.flatMap((s) => Array.from(s.values));
  if (all.length === 0) return;
  const max = Math.max(...all, 1e-9);
  const pad = 20;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  series.forEach(({ values, colour, name }, k) => {
    ctx.strokeStyle = colour;
    ctx.beginPath();
    values.forEach((v, i) => {
      const x = pad + (values.length > 1 ? (i / (values.length - 1)) * w : 0);
      const y = pad + h - (v / max) * h;
      if (i === 0) ctx.moveTo(x, y); else ctx.lineTo(x, y);
    });
    ctx.stroke();
    ctx.fillStyle = colour;
    ctx.fillText(name, pad + 6, pad + 14 + 14 * k);
  });
}

function params() {
  return {
    threshold: Number($("threshold").value),
    iterations: Number($("iterations").value),
    alpha0: Number($("alpha0").value),
  };
}

function guard(action) {
  return () => {
    try {
      action();
    } catch (e) {
      status(`error: ${e.message ?? e}`);
    }
  };
}

function showMasks() {
  const masks = regionMasks(Float64Array.from(OBJECT), Float64Array.from(target), params().threshold);
  drawMasks(masks);
  status(`target [${target.map((v) => v.toFixed(3)).join(", ")}]`);
}

function runEdit() {
  const { iterations, alpha0 } = params();
  status("running…");
  const start = performance.now();
  const run = toyEdit(Float64Array.from(OBJECT), Float64Array.from(target), iterations, alpha0);
  input = run.inputRgba;
  drawScene();
  paint($("edited"), run.editedRgba, run.size);
  drawCurve([
    { name: "l_total", values: run.lossTotal, colour: "#c33" },
    { name: "l_in", values: run.lossIn, colour: "#36c" },
  ]);
  const total = run.lossTotal;
  const summary = total.length ? `l_total ${total[0].toFixed(4)} → ${total[total.length - 1].toFixed(4)}` : "no iterations";
  status(`${summary} (${Math.round(performance.now() - start)} ms)`);
}

function showSchedule() {
  const steps = Number($("steps").value);
  $("timesteps").textContent = Array.from(scheduleTimesteps(steps)).join(" ");
}

function installDrag() {
  const canvas = $("scene");
  let anchor = null;
  const point = (e) => {
    const r = canvas.getBoundingClientRect();
    const clamp = (v) => Math.min(1, Math.max(0, v));
    return [clamp((e.clientX - r.left) / r.width), clamp((e.clientY - r.top) / r.height)];
  };
  canvas.addEventListener("pointerdown", (e) => { anchor = point(e); });
  canvas.addEventListener("pointermove", (e) => {
    if (!anchor) return;
    const [x, y] = point(e);
    const box = [Math.min(anchor[0], x), Math.min(anchor[1], y), Math.max(anchor[0], x), Math.max(anchor[1], y)];
    if (box[2] - box[0] > 0.02 && box[3] - box[1] > 0.02) {
      target = box;
      drawScene();
    }
  });
  window.addEventListener("pointerup", () => {
    if (anchor) {
      anchor = null;
      guard(showMasks)();
    }
  });
}

await init();
$("alpha0").value = defaultAlpha0();
$("show-masks").onclick = guard(showMasks);
$("run-edit").onclick = guard(runEdit);
$("show-schedule").onclick = guard(showSchedule);
installDrag();
guard(runEdit)();
guard(showMasks)();
guard(showSchedule)();
