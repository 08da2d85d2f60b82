import init, { synthesize, view_size, Demo } from "./pkg/gcg_demo.js";

const $ = (id) => document.getElementById(id);

function paint(canvas, rgba, size) {
  canvas.width = size;
  canvas.height = size;
  const img = new ImageData(new Uint8ClampedArray(rgba), size, size);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

async function main() {
  await init();
  const size = view_size();
  const demo = new Demo(0n);
  const cls = () => Number($("class").value);
  const seed = () => BigInt($("seed").value || 0);
  const channel = () => document.querySelector("input[name=channel]:checked").value;

  const draw = () => paint($("image"), synthesize(cls(), seed()), size);
  const explain = () => {
    paint($("overlay"), demo.explain(cls(), seed(), channel()), size);
    const p = Array.from(demo.probs(), (v) => v.toFixed(3));
    $("probs").textContent = `p = [${p.join(", ")}]`;
  };

  $("draw").onclick = () => { draw(); explain(); };
  $("explain").onclick = explain;
  $("train").onclick = () => {
    $("status").textContent = "training...";
    // let the status repaint before the blocking call
    setTimeout(() => {
      const t0 = performance.now();
      const acc = demo.train(Number($("epochs").value));
      const secs = ((performance.now() - t0) / 1000).toFixed(1);
      $("status").textContent = `best val accuracy ${acc.toFixed(3)} (${secs}s)`;
      explain();
    }, 20);
  };
  draw();
  explain();
}

main().catch((e) => { $("status").textContent = `error: ${e}`; });
