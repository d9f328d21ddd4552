import init, { risk_field, gam_smooth, gmm_cluster } from "./pkg/openhealth_web.js";

const $ = (id) => document.getElementById(id);

// small deterministic generator so Generate is repeatable per click count
function rng(seed) {
  let s = seed >>> 0;
  return () => {
    s = (s + 0x6d2b79f5) >>> 0;
    let t = s;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}
function gauss(r) {
  return Math.sqrt(-2 * Math.log(1 - r())) * Math.cos(2 * Math.PI * r());
}

function report(el, f) {
  try {
    el.classList.remove("err");
    return f();
  } catch (e) {
    el.classList.add("err");
    el.textContent = String(e.message || e);
    return null;
  }
}

// ---- plume ----

const BOUNDS = { latMin: 43.58, latMax: 43.86, lonMin: -79.64, lonMax: -79.12 };
const WIND = [0.08, 0.06, 0.05, 0.07, 0.1, 0.14, 0.3, 0.2];
let facilities = [
  [43.66, -79.45, 120],
  [43.74, -79.30, 60],
  [43.79, -79.52, 90],
];

function toCanvas(c, lat, lon) {
  return [
    ((lon - BOUNDS.lonMin) / (BOUNDS.lonMax - BOUNDS.lonMin)) * c.width,
    ((BOUNDS.latMax - lat) / (BOUNDS.latMax - BOUNDS.latMin)) * c.height,
  ];
}
function fromCanvas(c, x, y) {
  return [
    BOUNDS.latMax - (y / c.height) * (BOUNDS.latMax - BOUNDS.latMin),
    BOUNDS.lonMin + (x / c.width) * (BOUNDS.lonMax - BOUNDS.lonMin),
  ];
}

function drawPlume() {
  const c = $("plume");
  const ctx = c.getContext("2d");
  const mu = +$("mu").value, sigma = +$("sigma").value;
  $("mu-v").textContent = mu.toFixed(1);
  $("sigma-v").textContent = sigma.toFixed(1);
  const nx = 120, ny = 90;
  const field = report($("plume-out"), () =>
    JSON.parse(risk_field(
      new Float64Array(facilities.flat()),
      new Float64Array($("wind").checked ? WIND : []),
      mu, sigma, 1.0,
      BOUNDS.latMin, BOUNDS.latMax, BOUNDS.lonMin, BOUNDS.lonMax, nx, ny,
    )));
  if (!field) return;
  const img = ctx.createImageData(nx, ny);
  const span = field.max - field.min || 1;
  field.values.forEach((v, i) => {
    const t = Math.sqrt((v - field.min) / span);
    img.data[4 * i] = 255;
    img.data[4 * i + 1] = Math.round(255 * (1 - 0.75 * t));
    img.data[4 * i + 2] = Math.round(255 * (1 - t));
    img.data[4 * i + 3] = 255;
  });
  const tmp = new OffscreenCanvas(nx, ny);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = true;
  ctx.drawImage(tmp, 0, 0, c.width, c.height);
  ctx.fillStyle = "#000";
  for (const [lat, lon] of facilities) {
    const [x, y] = toCanvas(c, lat, lon);
    ctx.fillRect(x - 3, y - 3, 6, 6);
  }
  $("plume-out").textContent =
    `${facilities.length} facilities, risk range ${field.min.toFixed(3)} .. ${field.max.toFixed(3)}`;
}

$("plume").addEventListener("click", (e) => {
  const c = e.currentTarget;
  const [lat, lon] = fromCanvas(c, e.offsetX, e.offsetY);
  if (e.shiftKey) {
    if (!facilities.length) return;
    let best = 0, bd = Infinity;
    facilities.forEach(([a, b], i) => {
      const d = (a - lat) ** 2 + (b - lon) ** 2;
      if (d < bd) { bd = d; best = i; }
    });
    facilities.splice(best, 1);
  } else {
    facilities.push([lat, lon, 100]);
  }
  drawPlume();
});
for (const id of ["mu", "sigma", "wind"]) $(id).addEventListener("input", drawPlume);

// ---- smooth fit ----

let gamPts = { x: [], y: [] };
let gamClicks = 0;
const GX = [0, 6], GY = [-2.5, 2.5];

function genGam() {
  const r = rng(101 + gamClicks++);
  const noise = +$("noise").value;
  gamPts = { x: [], y: [] };
  for (let i = 0; i < 80; i++) {
    const x = GX[0] + r() * (GX[1] - GX[0]);
    gamPts.x.push(x);
    gamPts.y.push(Math.sin(1.3 * x) + 0.15 * x + noise * gauss(r));
  }
  drawGam();
}

function drawGam() {
  const c = $("gam");
  const ctx = c.getContext("2d");
  const px = (x) => ((x - GX[0]) / (GX[1] - GX[0])) * c.width;
  const py = (y) => ((GY[1] - y) / (GY[1] - GY[0])) * c.height;
  ctx.clearRect(0, 0, c.width, c.height);
  const fit = report($("gam-out"), () =>
    JSON.parse(gam_smooth(new Float64Array(gamPts.x), new Float64Array(gamPts.y), +$("k").value, 100)));
  if (fit) {
    ctx.fillStyle = "rgba(40,100,200,0.18)";
    ctx.beginPath();
    fit.x.forEach((x, i) => ctx.lineTo(px(x), py(fit.upper[i])));
    for (let i = fit.x.length - 1; i >= 0; i--) ctx.lineTo(px(fit.x[i]), py(fit.lower[i]));
    ctx.fill();
    ctx.strokeStyle = "#1a4fa0";
    ctx.lineWidth = 2;
    ctx.beginPath();
    fit.x.forEach((x, i) => ctx.lineTo(px(x), py(fit.fit[i])));
    ctx.stroke();
    $("gam-out").textContent =
      `n=${gamPts.x.length}  edf=${fit.edf.toFixed(2)}  lambda=${fit.lambda.toExponential(2)}  ` +
      `p=${fit.p_value.toExponential(2)}  deviance explained=${(100 * fit.deviance_explained).toFixed(1)}%`;
  }
  ctx.fillStyle = "#333";
  gamPts.x.forEach((x, i) => ctx.fillRect(px(x) - 1.5, py(gamPts.y[i]) - 1.5, 3, 3));
}

$("gam").addEventListener("click", (e) => {
  const c = e.currentTarget;
  gamPts.x.push(GX[0] + (e.offsetX / c.width) * (GX[1] - GX[0]));
  gamPts.y.push(GY[1] - (e.offsetY / c.height) * (GY[1] - GY[0]));
  drawGam();
});
$("gam-gen").addEventListener("click", genGam);
$("k").addEventListener("change", drawGam);

// ---- clustering ----

const COLORS = ["#d1495b", "#00798c", "#edae49", "#66a182", "#8d5a97", "#2e4057", "#f08a4b", "#7a7a7a"];
let gmmPts = { x: [], y: [] };
let gmmClicks = 0;

function genGmm() {
  const r = rng(7 + gmmClicks++);
  const blobs = Math.max(1, Math.min(5, +$("blobs").value));
  gmmPts = { x: [], y: [] };
  for (let b = 0; b < blobs; b++) {
    const cx = 1.5 + r() * 7, cy = 1.5 + r() * 7;
    const sx = 0.3 + r() * 0.7, sy = 0.3 + r() * 0.7, rho = r() * 1.2 - 0.6;
    for (let i = 0; i < 60; i++) {
      const u = gauss(r), v = gauss(r);
      gmmPts.x.push(cx + sx * u);
      gmmPts.y.push(cy + sy * (rho * u + Math.sqrt(1 - rho * rho) * v));
    }
  }
  drawGmm();
}

function ellipse(ctx, mean, cov, s) {
  const [a, b, d] = [cov[0][0], cov[0][1], cov[1][1]];
  const tr = (a + d) / 2, det = Math.sqrt(Math.max(0, ((a - d) / 2) ** 2 + b * b));
  const l1 = tr + det, l2 = Math.max(tr - det, 0);
  const ang = Math.atan2(l1 - a, b || 1e-12);
  ctx.beginPath();
  ctx.ellipse(mean[0] * s, (10 - mean[1]) * s, 2 * Math.sqrt(l1) * s, 2 * Math.sqrt(l2) * s,
    b === 0 && a >= d ? 0 : -ang, 0, 2 * Math.PI);
  ctx.stroke();
}

function drawGmm() {
  const c = $("gmm");
  const ctx = c.getContext("2d");
  const s = c.height / 10;
  ctx.clearRect(0, 0, c.width, c.height);
  if (!gmmPts.x.length) return;
  const res = report($("gmm-out"), () =>
    JSON.parse(gmm_cluster(new Float64Array(gmmPts.x), new Float64Array(gmmPts.y), +$("kmax").value, 1n)));
  gmmPts.x.forEach((x, i) => {
    ctx.fillStyle = res ? COLORS[res.labels[i] % COLORS.length] : "#333";
    ctx.fillRect(x * s - 2, (10 - gmmPts.y[i]) * s - 2, 4, 4);
  });
  if (!res) return;
  ctx.lineWidth = 1.5;
  res.means.forEach((m, j) => {
    ctx.strokeStyle = COLORS[j % COLORS.length];
    ellipse(ctx, m, res.covariances[j], s);
  });
  const rows = res.bic
    .filter((e) => e.bic !== null)
    .sort((p, q) => q.bic - p.bic)
    .slice(0, 5)
    .map((e) => `  K=${e.k} ${e.family.padEnd(10)} ${e.bic.toFixed(1)}`);
  $("gmm-out").textContent =
    `chosen K=${res.k} (${res.family}), n=${gmmPts.x.length}\ntop BIC:\n${rows.join("\n")}`;
}

$("gmm").addEventListener("click", (e) => {
  const c = e.currentTarget;
  const s = c.height / 10;
  gmmPts.x.push(e.offsetX / s);
  gmmPts.y.push(10 - e.offsetY / s);
  drawGmm();
});
$("gmm-gen").addEventListener("click", genGmm);
$("kmax").addEventListener("change", drawGmm);

await init();
$("status").textContent = "";
drawPlume();
genGam();
genGmm();
