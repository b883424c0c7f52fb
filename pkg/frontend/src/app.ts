// Browser wiring: load an image, paint a mask over it, submit to the
// removal service, compare source and result under a wipe slider, then
// refine and go again. All state lives in the CanvasSession; the page
// can be reloaded from a saved session file byte-for-byte.

import { RemovalClient, ApiError } from "./client.js";
import {
  CanvasSession,
  createSession,
  canSubmit,
  exportMask,
  noteSubmission,
  noteJobState,
  refine,
  saveSession,
  loadSession,
} from "./session.js";

const client = new RemovalClient(window.location.origin);
let session: CanvasSession | null = null;
let painting = false;
let lastPoint: { x: number; y: number } | null = null;
let resultUrl: string | null = null;

const el = <T extends HTMLElement>(id: string): T => {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
};

const imageCanvas = el<HTMLCanvasElement>("image-canvas");
const maskCanvas = el<HTMLCanvasElement>("mask-canvas");
const resultImg = el<HTMLImageElement>("result-img");
const sourceImg = el<HTMLImageElement>("source-img");
const previewPane = el<HTMLDivElement>("preview-pane");
const editorPane = el<HTMLDivElement>("editor-pane");
const hintBox = el<HTMLSpanElement>("hint");
const errorBox = el<HTMLDivElement>("error-box");
const historyList = el<HTMLUListElement>("history");
const submitButton = el<HTMLButtonElement>("submit");
const refineButton = el<HTMLButtonElement>("refine");
const undoButton = el<HTMLButtonElement>("undo");
const brushRadius = el<HTMLInputElement>("brush-radius");
const brushMode = el<HTMLSelectElement>("brush-mode");
const wipe = el<HTMLInputElement>("wipe");
const fileInput = el<HTMLInputElement>("file-input");
const sessionInput = el<HTMLInputElement>("session-input");

function setError(text: string | null): void {
  errorBox.textContent = text ?? "";
  errorBox.style.display = text ? "block" : "none";
}

function setHint(text: string | null): void {
  hintBox.textContent = text ?? "";
}

function repaintMaskOverlay(): void {
  if (!session) return;
  const ctx = maskCanvas.getContext("2d")!;
  const overlay = ctx.createImageData(session.width, session.height);
  const binary = session.mask.exportBinary();
  for (let i = 0; i < binary.length; i++) {
    if (binary[i]) {
      overlay.data[i * 4] = 255;
      overlay.data[i * 4 + 1] = 64;
      overlay.data[i * 4 + 2] = 64;
      overlay.data[i * 4 + 3] = 140;
    }
  }
  ctx.clearRect(0, 0, maskCanvas.width, maskCanvas.height);
  ctx.putImageData(overlay, 0, 0);
}

function refreshControls(): void {
  if (!session) {
    submitButton.disabled = true;
    refineButton.disabled = true;
    undoButton.disabled = true;
    return;
  }
  const gate = canSubmit(session);
  submitButton.disabled = !gate.ok || client.busy;
  setHint(gate.ok ? null : gate.hint ?? null);
  refineButton.disabled = session.mode !== "preview";
  undoButton.disabled = session.mask.undoDepth === 0;
  editorPane.style.display = session.mode === "edit" ? "block" : "none";
  previewPane.style.display = session.mode === "preview" ? "block" : "none";
}

function renderHistory(): void {
  if (!session) return;
  historyList.textContent = "";
  for (const record of session.history) {
    const item = document.createElement("li");
    const kernel = (record.echo as { dilation_kernel?: number }).dilation_kernel;
    const seed = (record.echo as { seed?: number }).seed;
    item.textContent =
      `${record.jobId.slice(0, 8)} ${record.state}` +
      ` (kernel ${kernel ?? "?"}, seed ${seed ?? "?"})`;
    historyList.appendChild(item);
  }
}

async function loadImageBytes(bytes: Uint8Array): Promise<void> {
  session = createSession(bytes);
  imageCanvas.width = maskCanvas.width = session.width;
  imageCanvas.height = maskCanvas.height = session.height;
  const blob = new Blob([session.imagePng.slice().buffer], { type: "image/png" });
  const bitmap = await createImageBitmap(blob);
  imageCanvas.getContext("2d")!.drawImage(bitmap, 0, 0);
  sourceImg.src = URL.createObjectURL(blob);
  repaintMaskOverlay();
  setError(null);
  refreshControls();
  renderHistory();
}

// Painting happens in canvas pixel coordinates: zoom is CSS-only, so
// the exported mask is always at native image resolution.
function canvasPoint(event: PointerEvent): { x: number; y: number } {
  const rect = maskCanvas.getBoundingClientRect();
  return {
    x: ((event.clientX - rect.left) / rect.width) * maskCanvas.width,
    y: ((event.clientY - rect.top) / rect.height) * maskCanvas.height,
  };
}

maskCanvas.addEventListener("pointerdown", (event) => {
  if (!session || session.mode !== "edit") return;
  painting = true;
  maskCanvas.setPointerCapture(event.pointerId);
  session.mask.beginStroke();
  const p = canvasPoint(event);
  session.mask.disk(p.x, p.y, Number(brushRadius.value), session.brushMode);
  lastPoint = p;
  repaintMaskOverlay();
  refreshControls();
});

maskCanvas.addEventListener("pointermove", (event) => {
  if (!painting || !session) return;
  const p = canvasPoint(event);
  session.mask.capsule(
    lastPoint?.x ?? p.x, lastPoint?.y ?? p.y, p.x, p.y,
    Number(brushRadius.value), session.brushMode,
  );
  lastPoint = p;
  repaintMaskOverlay();
});

const endStroke = () => {
  painting = false;
  lastPoint = null;
  refreshControls();
};
maskCanvas.addEventListener("pointerup", endStroke);
maskCanvas.addEventListener("pointercancel", endStroke);

undoButton.addEventListener("click", () => {
  if (!session) return;
  session.mask.undo();
  repaintMaskOverlay();
  refreshControls();
});

brushMode.addEventListener("change", () => {
  if (session) session.brushMode = brushMode.value as "paint" | "erase";
});

submitButton.addEventListener("click", () => void submit());

async function submit(): Promise<void> {
  if (!session) return;
  const gate = canSubmit(session);
  if (!gate.ok) {
    setHint(gate.hint ?? null);
    return;
  }
  setError(null);
  refreshControls();
  const maskPng = exportMask(session);
  try {
    submitButton.disabled = true;
    const { jobId, job, resultPng } = await client.runRemoval(
      session.imagePng, maskPng, { ...session.overrides },
      { onPoll: (view) => noteJobState(session!, view.id, view.state) },
    );
    noteSubmission(session, jobId, job.request);
    noteJobState(session, jobId, job.state);
    if (job.state === "FAILED" || !resultPng) {
      setError(`job failed: ${job.error ?? "unknown"}`);
      session.mode = "edit";
    } else {
      if (resultUrl) URL.revokeObjectURL(resultUrl);
      resultUrl = URL.createObjectURL(
        new Blob([resultPng.slice().buffer], { type: "image/png" }),
      );
      resultImg.src = resultUrl;
    }
  } catch (error) {
    // the session survives every failure; only the error box changes
    if (error instanceof ApiError) {
      setError(`${error.code}: ${error.detail}`);
    } else {
      setError(String(error));
    }
    session.mode = "edit";
  }
  renderHistory();
  refreshControls();
}

refineButton.addEventListener("click", () => {
  if (!session) return;
  refine(session);
  repaintMaskOverlay();
  refreshControls();
});

wipe.addEventListener("input", () => {
  resultImg.style.clipPath = `inset(0 0 0 ${wipe.value}%)`;
});

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  await loadImageBytes(new Uint8Array(await file.arrayBuffer()));
});

el<HTMLButtonElement>("save-session").addEventListener("click", () => {
  if (!session) return;
  const blob = new Blob([saveSession(session)], { type: "application/json" });
  const anchor = document.createElement("a");
  anchor.href = URL.createObjectURL(blob);
  anchor.download = "mask-studio-session.json";
  anchor.click();
  URL.revokeObjectURL(anchor.href);
});

sessionInput.addEventListener("change", async () => {
  const file = sessionInput.files?.[0];
  if (!file) return;
  try {
    const restored = loadSession(await file.text());
    await loadImageBytes(restored.imagePng);
    session = restored;
    repaintMaskOverlay();
    renderHistory();
    refreshControls();
  } catch (error) {
    setError(String(error));
  }
});

refreshControls();
