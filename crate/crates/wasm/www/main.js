// Static page logic for the three playground panels. Expects the
// wasm-pack output in ./pkg (see the README for the build command).

import init, {
  ScenePreview,
  TrainerLab,
  nms_playground,
  palette_color,
} from "./pkg/stuffnet_wasm.js";

await init();

const $ = (id) => document.getElementById(id);

function drawRgba(canvas, rgba, w, h) {
  const ctx = canvas.getContext("2d");
  const off = new OffscreenCanvas(w, h);
  off.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function classCss(cls) {
  const c = palette_color(10 + (cls - 1));
  return `rgb(${c[0]},${c[1]},${c[2]})`;
}

function drawBoxes(canvas, flat, scale) {
  const ctx = canvas.getContext("2d");
  ctx.lineWidth = 2;
  for (let i = 0; i < flat.length; i += 5) {
    ctx.strokeStyle = classCss(flat[i]);
    ctx.strokeRect(
      flat[i + 1] * scale,
      flat[i + 2] * scale,
      (flat[i + 3] - flat[i + 1]) * scale,
      (flat[i + 4] - flat[i + 2]) * scale,
    );
  }
}

// --- panel 1: scene generator -----------------------------------------

function sceneRefresh() {
  const seed = +$("sc-seed").value;
  const index = +$("sc-index").value;
  const rho = +$("sc-rho").value / 100;
  $("sc-seed-v").textContent = seed;
  $("sc-index-v").textContent = index;
  $("sc-rho-v").textContent = rho.toFixed(2);
  const scene = new ScenePreview(seed, index, rho, 64);
  const w = scene.width(), h = scene.height();
  drawRgba($("sc-image"), scene.image_rgba(), w, h);
  drawRgba($("sc-seg"), scene.seg_rgba(), w, h);
  if ($("sc-boxes").checked) {
    const scale = $("sc-image").width / w;
    drawBoxes($("sc-image"), scene.boxes(), scale);
  }
  scene.free();
}
for (const id of ["sc-seed", "sc-index", "sc-rho", "sc-boxes"])
  $(id).addEventListener("input", sceneRefresh);
sceneRefresh();

// --- panel 2: nms ------------------------------------------------------

function nmsRefresh() {
  const seed = +$("nms-seed").value;
  const count = +$("nms-count").value;
  const iou = +$("nms-iou").value / 100;
  $("nms-seed-v").textContent = seed;
  $("nms-count-v").textContent = count;
  $("nms-iou-v").textContent = iou.toFixed(2);
  const canvas = $("nms-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const rows = nms_playground(seed, count, iou, canvas.width);
  // suppressed first so kept boxes draw on top
  for (const pass of [0, 1]) {
    for (let i = 0; i < rows.length; i += 6) {
      const kept = rows[i + 5] > 0.5;
      if ((pass === 1) !== kept) continue;
      const score = rows[i + 4];
      const hue = Math.round(210 - 160 * score);
      ctx.strokeStyle = kept
        ? `hsl(${hue} 90% 45%)`
        : `hsl(${hue} 40% 75%)`;
      ctx.lineWidth = kept ? 2.5 : 1;
      ctx.strokeRect(rows[i], rows[i + 1], rows[i + 2] - rows[i], rows[i + 3] - rows[i + 1]);
    }
  }
}
for (const id of ["nms-seed", "nms-count", "nms-iou"])
  $(id).addEventListener("input", nmsRefresh);
nmsRefresh();

// --- panel 3: live training --------------------------------------------

let lab = null;
let losses = [];
let running = false;

function labReset() {
  if (lab) lab.free();
  const variant = $("tr-variant").value;
  const seed = +$("tr-seed").value;
  const rho = +$("tr-rho").value / 100;
  $("tr-seed-v").textContent = seed;
  $("tr-rho-v").textContent = rho.toFixed(2);
  lab = new TrainerLab(variant, seed, rho, 48);
  losses = [];
  $("loss").textContent = "iteration 0";
  labDetect();
  lossChart();
}

function labDetect() {
  if (!lab) return;
  const idx = +$("tr-test").value;
  $("tr-test-v").textContent = idx;
  const size = lab.image_size();
  drawRgba($("tr-canvas"), lab.detect_rgba(idx, 0.3), size, size);
  const scale = $("tr-canvas").width / size;
  const gt = lab.test_boxes(idx);
  const ctx = $("tr-canvas").getContext("2d");
  ctx.setLineDash([4, 3]);
  drawBoxes($("tr-canvas"), gt, scale);
  ctx.setLineDash([]);
}

function lossChart() {
  const canvas = $("tr-losschart");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (losses.length < 2) return;
  const max = Math.max(...losses);
  ctx.strokeStyle = "#c33";
  ctx.beginPath();
  losses.forEach((v, i) => {
    const x = (i / (losses.length - 1)) * canvas.width;
    const y = canvas.height - (v / max) * (canvas.height - 6) - 3;
    i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
  });
  ctx.stroke();
}

async function labRun() {
  if (!lab || running) return;
  running = true;
  $("tr-run").disabled = true;
  for (let chunk = 0; chunk < 10; chunk++) {
    const loss = lab.step(10);
    losses.push(loss);
    $("loss").textContent = `iteration ${lab.iteration()}  loss ${loss.toFixed(3)}`;
    lossChart();
    labDetect();
    // yield so the canvas repaints between chunks
    await new Promise((r) => setTimeout(r, 0));
  }
  $("tr-run").disabled = false;
  running = false;
}

$("tr-reset").addEventListener("click", labReset);
$("tr-run").addEventListener("click", labRun);
$("tr-test").addEventListener("input", labDetect);
for (const id of ["tr-variant", "tr-seed", "tr-rho"])
  $(id).addEventListener("change", labReset);
labReset();
