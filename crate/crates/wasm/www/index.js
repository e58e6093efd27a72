import init, { compare_intervals, bootstrap_histogram, efficiency_curve } from "./pkg/ptd_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function params() {
  return JSON.stringify({
    n: num("n"), pi: num("pi"), proxy_sd: num("sd"), proxy_bias: num("bias"), b: num("b"), seed: num("seed"),
  });
}

function status(msg, isErr = false) {
  $("status").textContent = msg;
  $("status").className = isErr ? "err" : "";
}

function run(fn) {
  status("working...");
  // let the status repaint before blocking on the computation
  setTimeout(() => {
    try {
      const t0 = performance.now();
      fn();
      status(`done in ${((performance.now() - t0) / 1000).toFixed(2)}s`);
    } catch (e) {
      status(String(e), true);
    }
  }, 10);
}

function scale(lo, hi, x0, x1) {
  return (v) => x0 + ((v - lo) / (hi - lo)) * (x1 - x0);
}

function drawCompare(res) {
  const c = $("compare"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const lo = Math.min(res.estimand[1], ...res.rows.map((r) => r.lo[1]));
  const hi = Math.max(res.estimand[1], ...res.rows.map((r) => r.hi[1]));
  const pad = 0.05 * (hi - lo);
  const x = scale(lo - pad, hi + pad, 130, c.width - 20);
  g.font = "13px system-ui";
  res.rows.forEach((r, i) => {
    const y = 30 + i * 38;
    g.fillStyle = "#222";
    g.fillText(r.method, 10, y + 4);
    g.strokeStyle = r.method === "naive" ? "#c33" : r.method === "classical" ? "#888" : "#2a6";
    g.lineWidth = 3;
    g.beginPath(); g.moveTo(x(r.lo[1]), y); g.lineTo(x(r.hi[1]), y); g.stroke();
    g.beginPath(); g.arc(x(r.point[1]), y, 4, 0, 2 * Math.PI); g.fill();
  });
  g.strokeStyle = "#000"; g.lineWidth = 1; g.setLineDash([4, 3]);
  g.beginPath(); g.moveTo(x(res.estimand[1]), 10); g.lineTo(x(res.estimand[1]), c.height - 10); g.stroke();
  g.setLineDash([]);

  const t = $("compare-table");
  t.innerHTML = "<tr><th>method</th><th>estimate</th><th>lower</th><th>upper</th><th>width</th></tr>";
  for (const r of res.rows) {
    const tr = document.createElement("tr");
    for (const v of [r.method, r.point[1], r.lo[1], r.hi[1], r.hi[1] - r.lo[1]]) {
      const td = document.createElement("td");
      td.textContent = typeof v === "number" ? v.toFixed(4) : v;
      tr.appendChild(td);
    }
    t.appendChild(tr);
  }
  status(`${res.n_labeled} labeled rows`);
}

function drawHist(h) {
  const c = $("hist"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const bins = h.debiased.length;
  const top = Math.max(...h.debiased, ...h.classical);
  const x = scale(h.lo, h.hi, 20, c.width - 20);
  const bw = (c.width - 40) / bins;
  const bar = (counts, color, off) => {
    g.fillStyle = color;
    counts.forEach((k, i) => {
      const hgt = (k / top) * (c.height - 50);
      g.fillRect(20 + i * bw + off, c.height - 30 - hgt, bw / 2, hgt);
    });
  };
  bar(h.classical, "rgba(120,120,120,0.7)", 0);
  bar(h.debiased, "rgba(40,160,100,0.8)", bw / 2);
  g.strokeStyle = "#000"; g.setLineDash([4, 3]);
  g.beginPath(); g.moveTo(x(h.estimand), 5); g.lineTo(x(h.estimand), c.height - 30); g.stroke();
  g.setLineDash([]);
  g.strokeStyle = "#2a6"; g.lineWidth = 3;
  g.beginPath(); g.moveTo(x(h.interval[0]), c.height - 15); g.lineTo(x(h.interval[1]), c.height - 15); g.stroke();
  g.lineWidth = 1;
  g.fillStyle = "#222"; g.font = "13px system-ui";
  g.fillText("grey: complete-sample replicates   green: debiased replicates and 90% interval", 20, 15);
}

function drawCurve(pts) {
  const c = $("curve"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const x = scale(0, 1, 50, c.width - 20);
  const y = scale(0, 1.2, c.height - 30, 10);
  g.strokeStyle = "#999";
  g.beginPath(); g.moveTo(x(0), y(0)); g.lineTo(x(1), y(0)); g.moveTo(x(0), y(0)); g.lineTo(x(0), y(1.2)); g.stroke();
  g.fillStyle = "#222"; g.font = "12px system-ui";
  for (const v of [0, 0.5, 1]) g.fillText(v.toFixed(1), 20, y(v) + 4);
  for (const v of [0, 0.5, 1]) g.fillText(v.toFixed(1), x(v) - 8, c.height - 12);
  g.fillText("proxy correlation", c.width / 2 - 40, c.height - 12);
  g.strokeStyle = "#36c"; g.lineWidth = 2;
  g.beginPath();
  for (let r = 0; r <= 1.0001; r += 0.02) {
    const pred = 1 - (1 - num("curve-pi")) * r * r;
    r === 0 ? g.moveTo(x(r), y(pred)) : g.lineTo(x(r), y(pred));
  }
  g.stroke(); g.lineWidth = 1;
  g.fillStyle = "#c33";
  for (const p of pts) { g.beginPath(); g.arc(x(p.rho), y(p.measured), 4, 0, 2 * Math.PI); g.fill(); }
}

await init();
$("run-compare").onclick = () => run(() => drawCompare(JSON.parse(compare_intervals(params()))));
$("run-hist").onclick = () => run(() => drawHist(JSON.parse(bootstrap_histogram(params(), 40))));
$("run-curve").onclick = () => run(() => drawCurve(JSON.parse(efficiency_curve(num("curve-pi"), num("curve-sims"), BigInt(num("seed"))))));
status("ready");
