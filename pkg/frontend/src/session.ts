/**
 * Client-side session state for the transfer console.
 *
 * Validation mirrors the server's config bounds exactly, so anything this
 * module accepts the service will too; a rejected form never costs a round
 * trip. The session also enforces the one-active-job rule: a second run
 * cannot start while one is still queued or sampling.
 */

import { JobRecord, JobRequest, TERMINAL_STATES, UploadReceipt } from "./api.js";
import { MaskRaster } from "./mask.js";

export const LAMBDA_MIN = 0;
export const LAMBDA_MAX = 1.5;
export const LAMBDA_STEP = 0.05;

/** Published defaults; the server fills these for any field the client omits. */
export const CONFIG_DEFAULTS = {
  w: 7.5,
  lam: 0.8,
  v_self: 700000.0,
  v_feat: 1500.0,
  tau_g: 30,
  tau_m: 40,
  r_lower: 0.33,
  r_upper: 3.0,
  T: 50,
  seed: 0,
} as const;

export type ConfigValues = { -readonly [K in keyof typeof CONFIG_DEFAULTS]: number };

const INT_FIELDS = new Set(["tau_g", "tau_m", "T", "seed"]);

/** Clamp to the slider range and snap to the 0.05 grid. */
export function snapLambda(value: number): number {
  const clamped = Math.min(LAMBDA_MAX, Math.max(LAMBDA_MIN, value));
  // Two decimals is exact for the 0.05 grid; avoids float dust like 0.7000000001.
  return Math.round(Math.round(clamped / LAMBDA_STEP) * LAMBDA_STEP * 100) / 100;
}

/**
 * Field-keyed error messages for a full config; empty object means valid.
 * Bounds match the server: T >= 1, lam >= 0, v_* >= 0, 0 <= tau_* <= T,
 * r_lower > 0, r_lower <= r_upper, integer fields actually integral.
 */
export function validateConfig(values: ConfigValues): Record<string, string> {
  const errors: Record<string, string> = {};
  for (const [field, value] of Object.entries(values)) {
    if (!Number.isFinite(value)) {
      errors[field] = "must be a number";
    } else if (INT_FIELDS.has(field) && !Number.isInteger(value)) {
      errors[field] = "must be an integer";
    }
  }
  if (Object.keys(errors).length > 0) return errors;
  if (values.T < 1) errors.T = "step count must be >= 1";
  if (values.lam < 0) errors.lam = "must be >= 0";
  if (values.v_self < 0) errors.v_self = "must be >= 0";
  if (values.v_feat < 0) errors.v_feat = "must be >= 0";
  if (values.tau_g < 0 || values.tau_g > values.T) errors.tau_g = `must lie in [0, T=${values.T}]`;
  if (values.tau_m < 0 || values.tau_m > values.T) errors.tau_m = `must lie in [0, T=${values.T}]`;
  if (values.r_lower <= 0) errors.r_lower = "must be > 0";
  else if (values.r_lower > values.r_upper) errors.r_lower = "must not exceed r_upper";
  return errors;
}

/** Parse a comma-separated λ list; null on any unparsable or out-of-range entry. */
export function parseLambdaList(text: string): number[] | null {
  const parts = text
    .split(",")
    .map((p) => p.trim())
    .filter((p) => p.length > 0);
  if (parts.length === 0) return null;
  const lams: number[] = [];
  for (const part of parts) {
    const value = Number(part);
    if (!Number.isFinite(value) || value < LAMBDA_MIN || value > LAMBDA_MAX) return null;
    lams.push(value);
  }
  return lams;
}

export interface UploadSlot {
  receipt: UploadReceipt;
  name: string;
}

export interface GalleryCard {
  lam: number;
  url: string;
}

export type CompareSide = "before" | "after";

export class SessionState {
  init: UploadSlot | null = null;
  material: UploadSlot | null = null;
  /** Created at the init image's resolution once that upload lands. */
  mask: MaskRaster | null = null;
  ySrc = "";
  yTrg = "";
  lambda: number = CONFIG_DEFAULTS.lam;
  overrides: Partial<ConfigValues> = {};
  errors: Record<string, string> = {};

  activeJobId: string | null = null;
  lastRecord: JobRecord | null = null;
  gallery: GalleryCard[] = [];
  compare: CompareSide = "after";

  setInitUpload(receipt: UploadReceipt, name: string, width: number, height: number): void {
    this.init = { receipt, name };
    this.mask = new MaskRaster(width, height);
  }

  setMaterialUpload(receipt: UploadReceipt, name: string): void {
    this.material = { receipt, name };
  }

  setLambda(value: number): void {
    this.lambda = snapLambda(value);
  }

  setOverride(field: keyof ConfigValues, value: number | null): void {
    if (value === null) {
      delete this.overrides[field];
    } else {
      this.overrides[field] = value;
    }
  }

  /** Defaults merged with overrides; the slider always wins for λ. */
  configValues(): ConfigValues {
    return { ...CONFIG_DEFAULTS, ...this.overrides, lam: this.lambda };
  }

  hasActiveJob(): boolean {
    return this.activeJobId !== null;
  }

  /**
   * Validate everything a run needs. Returns the error map and stores it on
   * the session for inline rendering; empty means the run may start.
   */
  validateForRun(kind: "transfer" | "sweep", lamsText?: string): Record<string, string> {
    const errors = validateConfig(this.configValues());
    if (this.init === null) errors.init = "upload an object image";
    if (this.material === null) errors.material = "upload a material exemplar";
    if (this.mask === null || this.mask.isEmpty()) errors.mask = "mask empty";
    if (this.ySrc.trim() === "") errors.y_src = "describe the source object";
    if (this.yTrg.trim() === "") errors.y_trg = "describe the target material";
    if (this.hasActiveJob()) errors.job = "a job is already running";
    if (kind === "sweep" && parseLambdaList(lamsText ?? "") === null) {
      errors.lams = `comma-separated values in [${LAMBDA_MIN}, ${LAMBDA_MAX}]`;
    }
    this.errors = errors;
    return errors;
  }

  /** Assemble the job payload. Requires a prior passing validateForRun. */
  buildRequest(kind: "transfer" | "sweep", maskSha: string, lams?: number[]): JobRequest {
    if (this.init === null || this.material === null) {
      throw new Error("buildRequest called before uploads are present");
    }
    const request: JobRequest = {
      kind,
      init: this.init.receipt.sha256,
      material: this.material.receipt.sha256,
      mask: maskSha,
      y_src: this.ySrc,
      y_trg: this.yTrg,
      config: { ...this.configValues() },
    };
    if (kind === "sweep" && lams) request.lams = lams;
    return request;
  }

  beginJob(record: JobRecord): void {
    if (this.hasActiveJob()) {
      throw new Error("a job is already running");
    }
    this.activeJobId = record.id;
    this.lastRecord = record;
  }

  /** Fold a polled record in; terminal states release the active slot. */
  applyRecord(record: JobRecord): void {
    if (record.id !== this.activeJobId) return;
    this.lastRecord = record;
    if (TERMINAL_STATES.includes(record.state)) {
      this.activeJobId = null;
    }
  }

  /** Fraction of sampling steps completed, for the progress bar. */
  progressFraction(): number {
    const progress = this.lastRecord?.progress;
    if (!progress || progress.total <= 0) return 0;
    return Math.min(1, progress.step / progress.total);
  }

  setGallery(cards: GalleryCard[]): void {
    this.gallery = [...cards].sort((a, b) => a.lam - b.lam);
  }

  /** Card click: move the slider to that card's λ. */
  selectGalleryCard(lam: number): void {
    this.setLambda(lam);
  }

  toggleCompare(): void {
    this.compare = this.compare === "after" ? "before" : "after";
  }
}
