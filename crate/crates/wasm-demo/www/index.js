import init, { exploreSoftmax, gateFrequencies, trainLadder } from "./pkg/dgkd_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#d55", "#5a5", "#55d", "#c93", "#9c3", "#3cc"];

function guard(out, f) {
  try {
    out.classList.remove("err");
    f();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e.message ?? e);
  }
}

function softmax() {
  const t = parseFloat($("sm-temp").value);
  $("sm-temp-v").textContent = t;
  guard($("sm-out"), () => {
    const r = JSON.parse(exploreSoftmax($("sm-s").value, $("sm-t").value, t));
    const bars = $("sm-bars");
    bars.innerHTML = "";
    r.student.forEach((p, i) => {
      for (const [cls, v] of [["", p], ["trainer", r.trainer[i]]]) {
        const b = document.createElement("div");
        b.className = "bar " + cls;
        b.innerHTML = `<div style="height:${Math.round(v * 100)}px"></div>${v.toFixed(2)}`;
        bars.appendChild(b);
      }
    });
    $("sm-out").textContent = `KD (T² · KL) = ${r.kd.toFixed(6)}   green: student, blue: trainer`;
  });
}

function gates() {
  guard($("g-out"), () => {
    const r = JSON.parse(gateFrequencies(+$("g-n").value, +$("g-t").value, +$("g-k").value, 1));
    const rows = r.frequency.map((f, i) => `source ${i}: dropped ${r.dropped[i]}  (${f.toFixed(4)})`);
    $("g-out").textContent = rows.join("\n") + `\nexpected ${r.expected.toFixed(4)}`;
  });
}

function draw(r) {
  const c = $("l-canvas");
  const ctx = c.getContext("2d");
  const cell = c.width / r.grid;
  ctx.globalAlpha = 0.25;
  r.regions.forEach((k, idx) => {
    ctx.fillStyle = COLORS[k % COLORS.length];
    const i = idx % r.grid;
    const j = Math.floor(idx / r.grid);
    ctx.fillRect(i * cell, c.height - (j + 1) * cell, cell + 1, cell + 1);
  });
  ctx.globalAlpha = 1;
  const toPx = (v) => ((v + 1.2) / 2.4) * c.width;
  for (const [x, y, k] of r.points) {
    ctx.fillStyle = COLORS[k % COLORS.length];
    ctx.beginPath();
    ctx.arc(toPx(x), c.height - toPx(y), 2.5, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function ladder() {
  $("l-out").textContent = "training…";
  setTimeout(() =>
    guard($("l-out"), () => {
      const r = JSON.parse(trainLadder($("l-mode").value, +$("l-epochs").value, 60, +$("l-seed").value));
      $("l-out").textContent = r.stages.map((s) => `${s.label}: ${(s.top1 * 100).toFixed(1)}%`).join("   ");
      draw(r);
    }),
  );
}

await init();
$("status").textContent = "";
for (const id of ["sm-s", "sm-t", "sm-temp"]) $(id).addEventListener("input", softmax);
$("g-run").addEventListener("click", gates);
$("l-run").addEventListener("click", ladder);
softmax();
gates();
