// Everything the editor needs to survive a reload lives in one session
// object: source image bytes, mask pixels, brush, overrides, job
// history. Serialization is plain JSON with base64 payloads so a saved
// session is a self-contained file.

import { MaskBuffer, BrushMode } from "./mask.js";
import { encodeMaskPng, pngHeader } from "./png.js";

export interface ParameterOverrides {
  dilation_kernel?: number;
  backend?: string;
  seed?: number;
  steps?: number;
  guidance_scale?: number;
  ip_adapter_scale?: number;
  composite_unmasked?: boolean;
}

export interface JobRecord {
  jobId: string;
  state: string;
  /** The request echo the server stored for this job. */
  echo: Record<string, unknown>;
}

export type SessionMode = "edit" | "preview";

export interface CanvasSession {
  imagePng: Uint8Array;
  width: number;
  height: number;
  mask: MaskBuffer;
  brushRadius: number;
  brushMode: BrushMode;
  overrides: ParameterOverrides;
  history: JobRecord[];
  lastJobId: string | null;
  mode: SessionMode;
  /** Exact copy of the binary mask as last submitted, for refine. */
  submittedMask: Uint8Array | null;
}

export function createSession(imagePng: Uint8Array): CanvasSession {
  const header = pngHeader(imagePng);
  return {
    imagePng: imagePng.slice(),
    width: header.width,
    height: header.height,
    mask: new MaskBuffer(header.width, header.height),
    brushRadius: 12,
    brushMode: "paint",
    overrides: {},
    history: [],
    lastJobId: null,
    mode: "edit",
    submittedMask: null,
  };
}

export interface SubmitGate {
  ok: boolean;
  hint?: string;
}

export function canSubmit(session: CanvasSession): SubmitGate {
  if (session.mask.isEmpty()) {
    return { ok: false, hint: "paint over the object first; the mask is empty" };
  }
  return { ok: true };
}

/** The mask as the single-channel PNG the service expects. */
export function exportMask(session: CanvasSession): Uint8Array {
  return encodeMaskPng(
    session.mask.exportBinary(), session.width, session.height,
  );
}

/** Record a submission: history entry, preview mode, refine snapshot. */
export function noteSubmission(
  session: CanvasSession, jobId: string, echo: Record<string, unknown>,
): void {
  session.history.push({ jobId, state: "QUEUED", echo });
  session.lastJobId = jobId;
  session.submittedMask = session.mask.exportBinary();
  session.mode = "preview";
}

export function noteJobState(session: CanvasSession, jobId: string, state: string): void {
  for (const record of session.history) {
    if (record.jobId === jobId) record.state = state;
  }
}

/**
 * Back to editing with exactly the mask that produced the preview,
 * regardless of anything that happened to the buffer in between.
 */
export function refine(session: CanvasSession): void {
  if (session.submittedMask) {
    session.mask.beginStroke();
    session.mask.setFrom(session.submittedMask);
  }
  session.mode = "edit";
}

function toDataUrl(bytes: Uint8Array, mime: string): string {
  let text = "";
  const step = 0x8000;
  for (let i = 0; i < bytes.length; i += step) {
    text += String.fromCharCode(...bytes.subarray(i, i + step));
  }
  return `data:${mime};base64,${btoa(text)}`;
}

function fromDataUrl(url: string): Uint8Array {
  const comma = url.indexOf(",");
  if (!url.startsWith("data:") || comma < 0) {
    throw new Error("payload is not a data URL");
  }
  const raw = atob(url.slice(comma + 1));
  const bytes = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) bytes[i] = raw.charCodeAt(i);
  return bytes;
}

interface SessionFile {
  format: "mask-studio-session";
  version: 1;
  image: string;
  mask: string;
  width: number;
  height: number;
  brushRadius: number;
  brushMode: BrushMode;
  overrides: ParameterOverrides;
  history: JobRecord[];
  lastJobId: string | null;
}

export function saveSession(session: CanvasSession): string {
  const file: SessionFile = {
    format: "mask-studio-session",
    version: 1,
    image: toDataUrl(session.imagePng, "image/png"),
    mask: toDataUrl(session.mask.exportBinary(), "application/octet-stream"),
    width: session.width,
    height: session.height,
    brushRadius: session.brushRadius,
    brushMode: session.brushMode,
    overrides: session.overrides,
    history: session.history,
    lastJobId: session.lastJobId,
  };
  return JSON.stringify(file);
}

export function loadSession(text: string): CanvasSession {
  const file = JSON.parse(text) as SessionFile;
  if (file.format !== "mask-studio-session" || file.version !== 1) {
    throw new Error("not a mask-studio session file");
  }
  const session = createSession(fromDataUrl(file.image));
  if (session.width !== file.width || session.height !== file.height) {
    throw new Error("session image dimensions disagree with the saved header");
  }
  session.mask.setFrom(fromDataUrl(file.mask));
  session.brushRadius = file.brushRadius;
  session.brushMode = file.brushMode;
  session.overrides = file.overrides ?? {};
  session.history = file.history ?? [];
  session.lastJobId = file.lastJobId ?? null;
  return session;
}
