import init, { DemoApp } from "./pkg/backbone_recon_demo.js";

const $ = (id) => document.getElementById(id);
const status = (text) => { $("status").textContent = text; };

let app;
let canvases = [];
let overlays = { skeletons: [], warm: [], fit: [] };

function setupCanvases() {
  const views = $("views");
  views.replaceChildren();
  canvases = [];
  for (let k = 0; k < app.views(); k++) {
    const c = document.createElement("canvas");
    c.width = app.preview_width();
    c.height = app.preview_height();
    views.appendChild(c);
    canvases.push(c);
  }
}

function drawLine(ctx, points, color) {
  if (points.length < 2) return;
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(points[0][0], points[0][1]);
  for (const [u, v] of points.slice(1)) ctx.lineTo(u, v);
  ctx.stroke();
}

function draw() {
  canvases.forEach((c, k) => {
    const ctx = c.getContext("2d");
    const gray = app.preview(k);
    const rgba = new Uint8ClampedArray(gray.length * 4);
    for (let i = 0; i < gray.length; i++) {
      const g = gray[i] ? 90 : 0;
      rgba.set([g, g, g, 255], 4 * i);
    }
    ctx.putImageData(new ImageData(rgba, c.width, c.height), 0, 0);
    const mine = (lines) => lines.filter((l) => l.view === k).map((l) => l.points);
    mine(overlays.skeletons).forEach((p) => drawLine(ctx, p, "#e33"));
    mine(overlays.warm).forEach((p) => drawLine(ctx, p, "#fb0"));
    mine(overlays.fit).forEach((p) => drawLine(ctx, p, "#3c6"));
  });
}

// Lets the status line paint before a blocking call.
const busy = (text, work) => {
  status(text);
  setTimeout(() => {
    try {
      work();
    } catch (e) {
      status(`error: ${e}`);
    }
  }, 20);
};

function render() {
  busy("rendering...", () => {
    app.set_scene(Number($("bend").value), Number($("radius").value));
    overlays = { skeletons: [], warm: [], fit: [] };
    $("use-warm").checked = false;
    draw();
    status("rendered");
  });
}

function warmStart() {
  busy("warm start...", () => {
    const t0 = performance.now();
    const r = JSON.parse(app.warm_start());
    overlays.skeletons = r.skeletons;
    overlays.warm = r.curve;
    overlays.fit = [];
    $("use-warm").checked = true;
    draw();
    status(`warm start: ${r.points} points, fit rms ${r.fit_rms_mm.toFixed(3)} mm, ` +
      `max deviation ${r.max_dev_mm.toFixed(3)} mm (${(performance.now() - t0).toFixed(0)} ms)`);
  });
}

function fit() {
  busy("fitting...", () => {
    const t0 = performance.now();
    const epochs = Math.max(1, Math.min(50, Number($("epochs").value) || 10));
    const r = JSON.parse(app.fit(Number($("p").value), epochs, $("use-warm").checked, 1));
    overlays.fit = r.curve;
    draw();
    const costs = r.epoch_costs.map((c) => c.toExponential(2)).join(" ");
    status(`${r.warm ? "warm" : "cold"} fit: max deviation ${r.max_dev_mm.toFixed(3)} mm ` +
      `(${(performance.now() - t0).toFixed(0)} ms)\ncost ${r.initial_cost.toExponential(2)} -> ${costs}`);
  });
}

async function main() {
  await init();
  app = new DemoApp();
  setupCanvases();
  draw();
  status("ready");
  $("bend").addEventListener("input", (e) => { $("bend-out").value = Number(e.target.value).toFixed(2); });
  $("radius").addEventListener("input", (e) => { $("radius-out").value = e.target.value; });
  $("render").addEventListener("click", render);
  $("warm").addEventListener("click", warmStart);
  $("fit").addEventListener("click", fit);
}

main().catch((e) => status(`failed to start: ${e}`));
