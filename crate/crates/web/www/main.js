import init, { fov_footprint, ball_in_view, Sandbox, fit_turn } from "./pkg/dribble_web.js";

const $ = (id) => document.getElementById(id);

function bindOutputs() {
  for (const input of document.querySelectorAll("input[type=range]")) {
    const out = input.parentElement.querySelector("output");
    const show = () => { out.textContent = Number(input.value).toFixed(2); };
    input.addEventListener("input", show);
    show();
  }
}

// World-to-canvas mapping: `scale` px per metre, world origin at (ox, oy) px.
function view(canvas, scale, ox, oy) {
  return {
    ctx: canvas.getContext("2d"),
    px: (x, y) => [ox + x * scale, oy - y * scale],
    world: (e) => {
      const r = canvas.getBoundingClientRect();
      return [(e.clientX - r.left - ox) / scale, (oy - (e.clientY - r.top)) / scale];
    },
    scale,
  };
}

function polygon(v, flat, fill) {
  if (flat.length < 6) return;
  v.ctx.beginPath();
  for (let i = 0; i < flat.length; i += 2) {
    const [x, y] = v.px(flat[i], flat[i + 1]);
    i === 0 ? v.ctx.moveTo(x, y) : v.ctx.lineTo(x, y);
  }
  v.ctx.closePath();
  v.ctx.fillStyle = fill;
  v.ctx.fill();
}

function disc(v, x, y, r, fill) {
  const [cx, cy] = v.px(x, y);
  v.ctx.beginPath();
  v.ctx.arc(cx, cy, Math.max(2, r * v.scale), 0, 2 * Math.PI);
  v.ctx.fillStyle = fill;
  v.ctx.fill();
}

function robot(v, x, y, yaw) {
  disc(v, x, y, 0.2, "#345");
  const [a, b] = v.px(x, y);
  const [c, d] = v.px(x + 0.35 * Math.cos(yaw), y + 0.35 * Math.sin(yaw));
  v.ctx.strokeStyle = "#fff";
  v.ctx.lineWidth = 2;
  v.ctx.beginPath(); v.ctx.moveTo(a, b); v.ctx.lineTo(c, d); v.ctx.stroke();
}

function setupFov() {
  const canvas = $("fov");
  const v = view(canvas, 40, 120, 210);
  let ball = [2.5, 0.5];
  const draw = () => {
    const p = ["fov-yaw", "fov-pan", "fov-tilt", "fov-scale"].map((id) => Number($(id).value));
    v.ctx.clearRect(0, 0, canvas.width, canvas.height);
    polygon(v, fov_footprint(0, 0, p[0], p[1], p[2], p[3]), "rgba(255, 200, 60, 0.45)");
    robot(v, 0, 0, p[0]);
    const seen = ball_in_view(0, 0, p[0], p[1], p[2], p[3], ball[0], ball[1]);
    disc(v, ball[0], ball[1], 0.11, seen ? "#2a2" : "#d22");
  };
  canvas.addEventListener("click", (e) => { ball = v.world(e); draw(); });
  for (const id of ["fov-yaw", "fov-pan", "fov-tilt", "fov-scale"]) $(id).addEventListener("input", draw);
  draw();
}

function setupSandbox() {
  const canvas = $("sandbox");
  const v = view(canvas, 40, 140, 240);
  const sb = new Sandbox(BigInt(Date.now() % 100000));
  let state = JSON.parse(sb.state_json());
  let aim = null;

  const command = () => {
    if (!aim) return;
    const dx = aim[0] - state.ball.x, dy = aim[1] - state.ball.y;
    const d = Math.hypot(dx, dy);
    const s = d < 0.3 ? 0 : Number($("sb-speed").value);
    sb.set_command(d > 0 ? (dx / d) * s : 0, d > 0 ? (dy / d) * s : 0);
  };
  canvas.addEventListener("click", (e) => {
    const w = v.world(e);
    if (e.shiftKey) { sb.place_ball(w[0], w[1]); } else { aim = w; }
  });
  $("sb-reset").addEventListener("click", () => { aim = null; sb.set_command(0, 0); sb.reset($("sb-scenario").value); });
  $("sb-scenario").addEventListener("change", () => $("sb-reset").click());
  $("sb-stop").addEventListener("click", () => { aim = null; sb.set_command(0, 0); });

  let last = performance.now(), debt = 0;
  const frame = (now) => {
    debt += Math.min(0.25, (now - last) / 1000);
    last = now;
    const steps = Math.floor(debt / 0.02);
    debt -= steps * 0.02;
    command();
    sb.step(steps);
    state = JSON.parse(sb.state_json());

    v.ctx.clearRect(0, 0, canvas.width, canvas.height);
    polygon(v, state.fov.flat(), "rgba(255, 200, 60, 0.35)");
    if (aim) disc(v, aim[0], aim[1], 0.06, "#88f");
    const r = state.robot;
    robot(v, r.x, r.y, r.yaw);
    disc(v, state.ball.x, state.ball.y, 0.11, state.ball_visible ? "#2a2" : "#d22");
    const t = state.task;
    $("sb-status").textContent =
      `t ${state.t.toFixed(1)} s\ncommand (${state.command.vx.toFixed(2)}, ${state.command.vy.toFixed(2)})\n` +
      `reward ${state.reward.total.toFixed(3)}\n` +
      (t ? `${t.kind}\nto target ${t.ball_to_target.toFixed(2)} m\nelapsed ${t.elapsed.toFixed(1)} s` : "");
    requestAnimationFrame(frame);
  };
  requestAnimationFrame(frame);
}

function setupFit() {
  const canvas = $("fit");
  const v = view(canvas, 80, 60, 200);
  let seed = 1;
  const gauss = () => {
    // Box-Muller on a small LCG so that resampling is repeatable.
    const u = () => { seed = (seed * 1103515245 + 12345) % 2147483648; return (seed + 1) / 2147483649; };
    return Math.sqrt(-2 * Math.log(u())) * Math.cos(2 * Math.PI * u());
  };
  let base = seed;
  const draw = () => {
    seed = base;
    const a = Number($("fit-angle").value) * Math.PI / 180;
    const noise = Number($("fit-noise").value);
    const skip = Number($("fit-skip").value);
    const pts = [];
    const n1 = 30, n2 = 40, step = 0.05;
    for (let i = 0; i < n1; i++) pts.push(i * step + noise * gauss(), noise * gauss());
    const cx = (n1 - 1) * step;
    for (let i = 1; i <= n2; i++) pts.push(cx + i * step * Math.cos(a) + noise * gauss(), i * step * Math.sin(a) + noise * gauss());

    v.ctx.clearRect(0, 0, canvas.width, canvas.height);
    for (let i = 0; i < pts.length; i += 2) {
      const k = i / 2;
      const skipped = k > n1 - 1 && k < n1 + skip;
      disc(v, pts[i], pts[i + 1], 0.012, skipped ? "#bbb" : "#444");
    }
    disc(v, cx, 0, 0.03, "#d80");
    try {
      const f = fit_turn(new Float64Array(pts), n1 - 1, skip);
      for (const [c0, c1, d0, d1] of [[f[1], f[2], f[3], f[4]], [f[5], f[6], f[7], f[8]]]) {
        const [x0, y0] = v.px(c0 - 2 * d0, c1 - 2 * d1);
        const [x1, y1] = v.px(c0 + 2 * d0, c1 + 2 * d1);
        v.ctx.strokeStyle = "#36c"; v.ctx.lineWidth = 1.5;
        v.ctx.beginPath(); v.ctx.moveTo(x0, y0); v.ctx.lineTo(x1, y1); v.ctx.stroke();
      }
      const want = Number($("fit-angle").value);
      $("fit-out").textContent =
        `fitted ${f[0].toFixed(2)} deg\ntrue   ${want.toFixed(2)} deg\nerror  ${(f[0] - want).toFixed(2)} deg`;
    } catch (err) {
      $("fit-out").textContent = String(err);
    }
  };
  for (const id of ["fit-angle", "fit-noise", "fit-skip"]) $(id).addEventListener("input", draw);
  $("fit-resample").addEventListener("click", () => { base = (base * 7919 + 17) % 2147483648; draw(); });
  draw();
}

await init();
bindOutputs();
setupFov();
setupSandbox();
setupFit();
