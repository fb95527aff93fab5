/**
 * DOM wiring for the console. Everything stateful lives in SessionState and
 * the API client; this file only moves values between them and the page.
 * Nothing here mutates server state except through the documented endpoints.
 */

import { ApiClient, JobRecord } from "./api.js";
import { pollJob } from "./poll.js";
import { CONFIG_DEFAULTS, ConfigValues, SessionState, parseLambdaList } from "./session.js";

const apiBase =
  new URLSearchParams(location.search).get("api") ?? "http://127.0.0.1:8000";
const client = new ApiClient(apiBase);
const session = new SessionState();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

const backendLine = el<HTMLSpanElement>("backend-line");
const initFile = el<HTMLInputElement>("init-file");
const materialFile = el<HTMLInputElement>("material-file");
const ySrcInput = el<HTMLInputElement>("y-src");
const yTrgInput = el<HTMLInputElement>("y-trg");
const lamSlider = el<HTMLInputElement>("lam-slider");
const lamValue = el<HTMLSpanElement>("lam-value");
const runBtn = el<HTMLButtonElement>("run-btn");
const cancelBtn = el<HTMLButtonElement>("cancel-btn");
const sweepBtn = el<HTMLButtonElement>("sweep-btn");
const lamsInput = el<HTMLInputElement>("lams-input");
const canvas = el<HTMLCanvasElement>("paint-canvas");
const paintHint = el<HTMLSpanElement>("paint-hint");
const brushSize = el<HTMLInputElement>("brush-size");
const toolPaint = el<HTMLButtonElement>("tool-paint");
const toolErase = el<HTMLButtonElement>("tool-erase");
const toolClear = el<HTMLButtonElement>("tool-clear");
const progressBar = el<HTMLDivElement>("progress-bar");
const statusLine = el<HTMLDivElement>("status-line");
const previewCard = el<HTMLDivElement>("preview-card");
const previewImg = el<HTMLImageElement>("preview-img");
const resultCard = el<HTMLDivElement>("result-card");
const resultImg = el<HTMLImageElement>("result-img");
const resultCaption = el<HTMLSpanElement>("result-caption");
const compareBtn = el<HTMLButtonElement>("compare-btn");
const galleryDiv = el<HTMLDivElement>("gallery");

let initBitmap: ImageBitmap | null = null;
let beforeUrl: string | null = null;
let afterUrl: string | null = null;
let afterLam: number | null = null;
let previewUrl: string | null = null;
let brushMode: "paint" | "erase" = "paint";
let painting = false;
let lastPoint: { x: number; y: number } | null = null;

function renderErrors(): void {
  for (const span of document.querySelectorAll<HTMLSpanElement>("[data-error]")) {
    const key = span.dataset.error ?? "";
    span.textContent = session.errors[key] ?? "";
  }
}

function setBusy(busy: boolean): void {
  runBtn.disabled = busy;
  sweepBtn.disabled = busy;
  cancelBtn.disabled = !busy;
}

function swapUrl(old: string | null, bytes: Uint8Array): string {
  if (old !== null) URL.revokeObjectURL(old);
  return URL.createObjectURL(new Blob([bytes as BlobPart], { type: "image/png" }));
}

// --- mask painting -------------------------------------------------------

function redrawCanvas(): void {
  const ctx = canvas.getContext("2d");
  if (ctx === null || initBitmap === null || session.mask === null) return;
  ctx.drawImage(initBitmap, 0, 0);
  const frame = ctx.getImageData(0, 0, canvas.width, canvas.height);
  const a = 110 / 255;
  for (let y = 0; y < canvas.height; y++) {
    for (let x = 0; x < canvas.width; x++) {
      if (!session.mask.get(x, y)) continue;
      const o = (y * canvas.width + x) * 4;
      // Red tint over masked pixels; the image stays visible underneath.
      frame.data[o] = Math.round(224 * a + frame.data[o]! * (1 - a));
      frame.data[o + 1] = Math.round(frame.data[o + 1]! * (1 - a));
      frame.data[o + 2] = Math.round(frame.data[o + 2]! * (1 - a));
    }
  }
  ctx.putImageData(frame, 0, 0);
}

function canvasPoint(event: PointerEvent): { x: number; y: number } {
  const rect = canvas.getBoundingClientRect();
  return {
    x: ((event.clientX - rect.left) * canvas.width) / rect.width,
    y: ((event.clientY - rect.top) * canvas.height) / rect.height,
  };
}

canvas.addEventListener("pointerdown", (event) => {
  if (session.mask === null) return;
  painting = true;
  canvas.setPointerCapture(event.pointerId);
  const p = canvasPoint(event);
  session.mask.stamp(p.x, p.y, Number(brushSize.value), brushMode === "paint");
  lastPoint = p;
  redrawCanvas();
});

canvas.addEventListener("pointermove", (event) => {
  if (!painting || session.mask === null || lastPoint === null) return;
  const p = canvasPoint(event);
  session.mask.stroke(lastPoint.x, lastPoint.y, p.x, p.y, Number(brushSize.value), brushMode === "paint");
  lastPoint = p;
  redrawCanvas();
});

canvas.addEventListener("pointerup", () => {
  painting = false;
  lastPoint = null;
});

function setBrushMode(mode: "paint" | "erase"): void {
  brushMode = mode;
  toolPaint.classList.toggle("on", mode === "paint");
  toolErase.classList.toggle("on", mode === "erase");
}

toolPaint.addEventListener("click", () => setBrushMode("paint"));
toolErase.addEventListener("click", () => setBrushMode("erase"));
toolClear.addEventListener("click", () => {
  session.mask?.clear();
  redrawCanvas();
});

// --- uploads -------------------------------------------------------------

async function handleInitFile(file: File): Promise<void> {
  const bytes = new Uint8Array(await file.arrayBuffer());
  const receipt = await client.upload(bytes, file.name);
  const bitmap = await createImageBitmap(new Blob([bytes as BlobPart]));
  initBitmap = bitmap;
  session.setInitUpload(receipt, file.name, bitmap.width, bitmap.height);
  canvas.width = bitmap.width;
  canvas.height = bitmap.height;
  if (beforeUrl !== null) URL.revokeObjectURL(beforeUrl);
  beforeUrl = URL.createObjectURL(new Blob([bytes as BlobPart], { type: "image/png" }));
  paintHint.textContent = `${bitmap.width}×${bitmap.height}; paint the region to re-material`;
  redrawCanvas();
}

initFile.addEventListener("change", () => {
  const file = initFile.files?.[0];
  if (file) void handleInitFile(file).catch(showError);
});

materialFile.addEventListener("change", () => {
  const file = materialFile.files?.[0];
  if (!file) return;
  void (async () => {
    const bytes = new Uint8Array(await file.arrayBuffer());
    const receipt = await client.upload(bytes, file.name);
    session.setMaterialUpload(receipt, file.name);
  })().catch(showError);
});

// --- form bindings -------------------------------------------------------

ySrcInput.addEventListener("input", () => (session.ySrc = ySrcInput.value));
yTrgInput.addEventListener("input", () => (session.yTrg = yTrgInput.value));

function syncLambda(): void {
  lamSlider.value = String(session.lambda);
  lamValue.textContent = session.lambda.toFixed(2);
}

lamSlider.addEventListener("input", () => {
  session.setLambda(Number(lamSlider.value));
  syncLambda();
});

for (const field of Object.keys(CONFIG_DEFAULTS) as (keyof ConfigValues)[]) {
  if (field === "lam") continue;
  const input = document.getElementById(`cfg-${field}`) as HTMLInputElement | null;
  if (input === null) continue;
  input.addEventListener("input", () => {
    session.setOverride(field, input.value.trim() === "" ? null : Number(input.value));
  });
}

// --- run lifecycle -------------------------------------------------------

function showError(err: unknown): void {
  statusLine.textContent = `error: ${err instanceof Error ? err.message : String(err)}`;
}

function updateRunUi(record: JobRecord): void {
  progressBar.style.width = `${session.progressFraction() * 100}%`;
  const { phase, step, total } = record.progress;
  statusLine.textContent =
    record.state === "sampling" || record.state === "inverting"
      ? `${phase} ${step}/${total}`
      : record.state;
}

function showResultCard(state: string, caption: string, imageUrl: string | null): void {
  resultCard.hidden = false;
  resultCard.className = `card state-${state}`;
  resultCaption.textContent = caption;
  compareBtn.hidden = imageUrl === null;
  if (imageUrl !== null) {
    resultImg.hidden = false;
    resultImg.src = imageUrl;
  } else {
    resultImg.hidden = true;
    resultImg.removeAttribute("src");
  }
  session.compare = "after";
  compareBtn.textContent = "before";
}

compareBtn.addEventListener("click", () => {
  session.toggleCompare();
  const showing = session.compare;
  compareBtn.textContent = showing === "after" ? "before" : "after";
  const url = showing === "after" ? afterUrl : beforeUrl;
  if (url !== null) resultImg.src = url;
});

async function finishTransfer(record: JobRecord): Promise<void> {
  previewCard.hidden = true;
  if (record.state === "done") {
    const bytes = await client.fetchImage(client.resultUrl(record.id));
    afterUrl = swapUrl(afterUrl, bytes);
    afterLam = record.results[0]?.lam ?? session.lambda;
    showResultCard("done", `result λ=${afterLam}`, afterUrl);
  } else if (record.state === "cancelled") {
    const { step, total } = record.progress;
    showResultCard("cancelled", `cancelled at step ${step}/${total}`, null);
  } else {
    showResultCard("failed", `failed: ${record.error ?? "unknown error"}`, null);
  }
}

async function runJob(kind: "transfer" | "sweep"): Promise<void> {
  const errors = session.validateForRun(kind, lamsInput.value);
  renderErrors();
  if (Object.keys(errors).length > 0) return;
  setBusy(true);
  resultCard.hidden = true;
  try {
    const maskReceipt = await client.upload(session.mask!.toPng(), "mask.png");
    const lams = kind === "sweep" ? parseLambdaList(lamsInput.value) ?? undefined : undefined;
    const record = await client.createJob(session.buildRequest(kind, maskReceipt.sha256, lams));
    session.beginJob(record);
    updateRunUi(record);
    const final = await pollJob(client, record.id, {
      onUpdate: (r) => {
        session.applyRecord(r);
        updateRunUi(r);
      },
      onPreview: (bytes) => {
        previewUrl = swapUrl(previewUrl, bytes);
        previewImg.src = previewUrl;
        previewCard.hidden = false;
      },
    });
    if (kind === "sweep" && final.state === "done") {
      await loadGallery(final.id);
      statusLine.textContent = `sweep done: ${session.gallery.length} cards`;
    } else {
      await finishTransfer(final);
    }
  } catch (err) {
    session.activeJobId = null;
    showError(err);
  } finally {
    setBusy(false);
    renderErrors();
  }
}

runBtn.addEventListener("click", () => void runJob("transfer"));
sweepBtn.addEventListener("click", () => void runJob("sweep"));

cancelBtn.addEventListener("click", () => {
  const jobId = session.activeJobId;
  if (jobId !== null) void client.cancelJob(jobId).catch(showError);
});

// --- sweep gallery -------------------------------------------------------

async function loadGallery(jobId: string): Promise<void> {
  session.setGallery(await client.gallery(jobId));
  galleryDiv.textContent = "";
  for (const card of session.gallery) {
    const bytes = await client.fetchImage(card.url);
    const url = URL.createObjectURL(new Blob([bytes as BlobPart], { type: "image/png" }));
    const div = document.createElement("div");
    div.className = "card";
    const img = document.createElement("img");
    img.src = url;
    img.alt = `λ=${card.lam}`;
    const caption = document.createElement("div");
    caption.className = "caption";
    caption.textContent = `λ=${card.lam}`;
    div.append(img, caption);
    div.addEventListener("click", () => {
      session.selectGalleryCard(card.lam);
      syncLambda();
      for (const other of galleryDiv.children) other.classList.remove("selected");
      div.classList.add("selected");
      afterUrl = url;
      afterLam = card.lam;
      showResultCard("done", `result λ=${card.lam}`, url);
    });
    galleryDiv.append(div);
  }
}

// --- boot ----------------------------------------------------------------

void client
  .health()
  .then((h) => {
    backendLine.textContent = `${apiBase} · ${h.backend} backend · ${h.workers} workers`;
  })
  .catch(() => {
    backendLine.textContent = `service unreachable at ${apiBase}`;
  });

syncLambda();
