// Expects the wasm-bindgen output in ./pkg (see the README).
import init, { Demo } from "./pkg/specadv_web.js";

const $ = (id) => document.getElementById(id);
const canvas = $("view3d");
const ctx = canvas.getContext("2d");
let demo = null;
let seed = 1;
let angle = 0.6;
let values = null;
let faces = null;

function colormap(t) {
  // blue -> white -> red
  t = Math.max(-1, Math.min(1, t));
  const a = Math.round(255 * (1 - Math.abs(t)));
  return t < 0 ? `rgb(${a},${a},255)` : `rgb(255,${a},${a})`;
}

function draw() {
  const pos = demo.positions();
  const c = Math.cos(angle), s = Math.sin(angle);
  const n = pos.length / 3;
  const px = new Float64Array(n), py = new Float64Array(n), pz = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    const x = pos[3 * i], y = pos[3 * i + 1], z = pos[3 * i + 2];
    const xr = c * x + s * y, yr = -s * x + c * y;
    px[i] = canvas.width / 2 + 180 * xr;
    py[i] = canvas.height / 2 - 180 * z;
    pz[i] = yr;
  }
  const order = [];
  for (let f = 0; f < faces.length; f += 3) {
    const [a, b, d] = [faces[f], faces[f + 1], faces[f + 2]];
    order.push([pz[a] + pz[b] + pz[d], a, b, d]);
  }
  order.sort((u, v) => v[0] - u[0]);
  let scale = 0;
  for (const v of values) scale = Math.max(scale, Math.abs(v));
  scale = scale || 1;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (const [, a, b, d] of order) {
    ctx.beginPath();
    ctx.moveTo(px[a], py[a]);
    ctx.lineTo(px[b], py[b]);
    ctx.lineTo(px[d], py[d]);
    ctx.closePath();
    ctx.fillStyle = colormap((values[a] + values[b] + values[d]) / (3 * scale));
    ctx.fill();
    ctx.strokeStyle = "rgba(0,0,0,0.15)";
    ctx.stroke();
  }
}

function update() {
  const mode = $("view").value;
  const k = Number($("k").value);
  const amp = Number($("amp").value) / 100;
  $("kval").textContent = k;
  $("ampval").textContent = amp.toFixed(2);
  try {
    if (mode === "eig") {
      demo.reset();
      const f = demo.eigenfunction(k);
      const lambda = f[f.length - 1];
      values = f.subarray(0, f.length - 1);
      $("status").textContent = `eigenfunction ${k}, eigenvalue ${lambda.toFixed(4)}`;
    } else {
      demo.perturb(Math.max(1, k), amp, BigInt(seed));
      const change = demo.curvatureChange();
      if (mode === "curv") {
        values = change;
      } else {
        values = new Float64Array(demo.vertexCount()).fill(0);
      }
      const mean = change.reduce((a, b) => a + b, 0) / change.length;
      $("status").textContent = `k = ${Math.max(1, k)}, seed ${seed}, mean curvature change ${mean.toFixed(4)}`;
    }
  } catch (e) {
    $("status").textContent = String(e);
  }
  draw();
}

function load() {
  demo = new Demo(Number($("cls").value), 3);
  faces = demo.faces();
  $("k").max = demo.maxK() - 1;
  update();
}

await init();
for (let i = 0; i < 10; i++) $("cls").add(new Option(String(i), String(i)));
$("cls").onchange = load;
for (const id of ["view", "k", "amp"]) $(id).oninput = update;
$("seed").onclick = () => { seed += 1; update(); };
canvas.onmousemove = (e) => {
  if (e.buttons) { angle += e.movementX * 0.01; draw(); }
};
load();
