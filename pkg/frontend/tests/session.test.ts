import { describe, expect, it } from "vitest";

import { JobRecord } from "../src/api.js";
import {
  CONFIG_DEFAULTS,
  LAMBDA_MAX,
  LAMBDA_STEP,
  SessionState,
  parseLambdaList,
  snapLambda,
  validateConfig,
} from "../src/session.js";

function record(overrides: Partial<JobRecord> = {}): JobRecord {
  return {
    id: "job-1",
    kind: "transfer",
    state: "queued",
    error: null,
    progress: { phase: "queued", step: 0, total: 50, preview: 0 },
    results: [],
    created_at: 0,
    updated_at: 0,
    ...overrides,
  };
}

/** Session with uploads, prompts, and a non-empty mask: ready to run. */
function readySession(): SessionState {
  const session = new SessionState();
  session.setInitUpload({ sha256: "a".repeat(64), bytes: 10 }, "object.png", 32, 32);
  session.setMaterialUpload({ sha256: "b".repeat(64), bytes: 10 }, "material.png");
  session.mask!.stamp(16, 16, 6, true);
  session.ySrc = "a wooden chair";
  session.yTrg = "a brass chair";
  return session;
}

describe("snapLambda", () => {
  it("clamps to the slider range", () => {
    expect(snapLambda(-0.3)).toBe(0);
    expect(snapLambda(9)).toBe(LAMBDA_MAX);
  });

  it("snaps to the 0.05 grid without float dust", () => {
    expect(snapLambda(0.37)).toBe(0.35);
    expect(snapLambda(0.38)).toBe(0.4);
    expect(snapLambda(0.7000000000000001)).toBe(0.7);
    expect(snapLambda(1.1)).toBe(1.1);
  });

  it("every grid point is a fixed point", () => {
    for (let i = 0; Math.round(i * LAMBDA_STEP * 100) / 100 <= LAMBDA_MAX; i++) {
      const value = Math.round(i * LAMBDA_STEP * 100) / 100;
      expect(snapLambda(value)).toBe(value);
    }
  });
});

describe("validateConfig", () => {
  it("accepts the published defaults", () => {
    expect(validateConfig({ ...CONFIG_DEFAULTS })).toEqual({});
  });

  it.each([
    ["T", { T: 0 }, /step count/],
    ["lam", { lam: -0.1 }, />= 0/],
    ["v_self", { v_self: -1 }, />= 0/],
    ["v_feat", { v_feat: -1 }, />= 0/],
    ["tau_g", { tau_g: 51 }, /\[0, T=50\]/],
    ["tau_m", { tau_m: -1 }, /\[0, T=50\]/],
    ["r_lower", { r_lower: 0 }, /> 0/],
    ["r_lower", { r_lower: 5, r_upper: 3 }, /exceed/],
  ] as const)("rejects %s out of bounds", (field, patch, message) => {
    const errors = validateConfig({ ...CONFIG_DEFAULTS, ...patch });
    expect(errors[field]).toMatch(message);
  });

  it("requires integer step and window fields", () => {
    expect(validateConfig({ ...CONFIG_DEFAULTS, T: 10.5 }).T).toMatch(/integer/);
    expect(validateConfig({ ...CONFIG_DEFAULTS, tau_g: 1.2 }).tau_g).toMatch(/integer/);
    expect(validateConfig({ ...CONFIG_DEFAULTS, seed: 0.5 }).seed).toMatch(/integer/);
  });

  it("rejects non-finite values before bound checks", () => {
    expect(validateConfig({ ...CONFIG_DEFAULTS, w: NaN }).w).toMatch(/number/);
    expect(validateConfig({ ...CONFIG_DEFAULTS, v_self: Infinity }).v_self).toMatch(/number/);
  });

  it("ties the tau windows to the overridden T", () => {
    expect(validateConfig({ ...CONFIG_DEFAULTS, T: 10, tau_g: 10, tau_m: 10 })).toEqual({});
    expect(validateConfig({ ...CONFIG_DEFAULTS, T: 10, tau_g: 30 }).tau_g).toMatch(/T=10/);
  });
});

describe("parseLambdaList", () => {
  it("parses comma-separated values", () => {
    expect(parseLambdaList("0.5, 0.8,1.1 , 1.5")).toEqual([0.5, 0.8, 1.1, 1.5]);
  });

  it("keeps the entered order; sorting is the server's job", () => {
    expect(parseLambdaList("1.5, 0.5")).toEqual([1.5, 0.5]);
  });

  it("rejects empties, junk, and values off the slider range", () => {
    expect(parseLambdaList("")).toBeNull();
    expect(parseLambdaList(" , ,")).toBeNull();
    expect(parseLambdaList("0.5, nope")).toBeNull();
    expect(parseLambdaList("0.5, 2.0")).toBeNull();
    expect(parseLambdaList("-0.1")).toBeNull();
  });
});

describe("SessionState", () => {
  it("slider writes snap and feed the config", () => {
    const session = new SessionState();
    session.setLambda(0.42);
    expect(session.lambda).toBe(0.4);
    expect(session.configValues().lam).toBe(0.4);
  });

  it("overrides merge over defaults but never λ", () => {
    const session = new SessionState();
    session.setOverride("T", 10);
    session.setOverride("lam", 99);
    session.setLambda(0.5);
    const values = session.configValues();
    expect(values.T).toBe(10);
    expect(values.lam).toBe(0.5);
    session.setOverride("T", null);
    expect(session.configValues().T).toBe(CONFIG_DEFAULTS.T);
  });

  it("an untouched mask blocks the run with exactly 'mask empty'", () => {
    const session = readySession();
    session.mask!.clear();
    const errors = session.validateForRun("transfer");
    expect(errors.mask).toBe("mask empty");
    expect(session.errors.mask).toBe("mask empty");
  });

  it("a ready session validates clean", () => {
    expect(readySession().validateForRun("transfer")).toEqual({});
  });

  it("missing uploads and prompts each get their own inline error", () => {
    const session = new SessionState();
    const errors = session.validateForRun("transfer");
    expect(errors.init).toBeTruthy();
    expect(errors.material).toBeTruthy();
    expect(errors.mask).toBe("mask empty");
    expect(errors.y_src).toBeTruthy();
    expect(errors.y_trg).toBeTruthy();
  });

  it("config violations surface field-keyed errors", () => {
    const session = readySession();
    session.setOverride("T", 10);
    session.setOverride("tau_g", 30);
    const errors = session.validateForRun("transfer");
    expect(errors.tau_g).toMatch(/T=10/);
  });

  it("sweep runs validate the λ list too", () => {
    const session = readySession();
    expect(session.validateForRun("sweep", "0.5, 0.8")).toEqual({});
    expect(session.validateForRun("sweep", "0.5, 7").lams).toBeTruthy();
    expect(session.validateForRun("sweep", "").lams).toBeTruthy();
  });

  it("allows at most one active job", () => {
    const session = readySession();
    session.beginJob(record());
    expect(session.hasActiveJob()).toBe(true);
    expect(() => session.beginJob(record({ id: "job-2" }))).toThrow(/already running/);
    expect(session.validateForRun("transfer").job).toMatch(/already running/);
  });

  it("terminal records release the active slot; foreign records are ignored", () => {
    const session = readySession();
    session.beginJob(record());
    session.applyRecord(record({ id: "other", state: "done" }));
    expect(session.hasActiveJob()).toBe(true);
    session.applyRecord(record({ state: "sampling", progress: { phase: "sampling", step: 25, total: 50, preview: 0 } }));
    expect(session.hasActiveJob()).toBe(true);
    expect(session.progressFraction()).toBeCloseTo(0.5);
    session.applyRecord(record({ state: "cancelled" }));
    expect(session.hasActiveJob()).toBe(false);
  });

  it("builds the job payload with the service's field names", () => {
    const session = readySession();
    session.setLambda(1.1);
    const request = session.buildRequest("sweep", "c".repeat(64), [1.5, 0.5]);
    expect(request).toMatchObject({
      kind: "sweep",
      init: "a".repeat(64),
      material: "b".repeat(64),
      mask: "c".repeat(64),
      y_src: "a wooden chair",
      y_trg: "a brass chair",
      lams: [1.5, 0.5],
    });
    expect(request.config).toMatchObject({ lam: 1.1, T: 50 });
  });

  it("gallery cards sort ascending and clicking one moves the slider", () => {
    const session = new SessionState();
    session.setGallery([
      { lam: 1.5, url: "/jobs/x/result?index=3" },
      { lam: 0.5, url: "/jobs/x/result?index=0" },
      { lam: 1.1, url: "/jobs/x/result?index=2" },
      { lam: 0.8, url: "/jobs/x/result?index=1" },
    ]);
    expect(session.gallery.map((c) => c.lam)).toEqual([0.5, 0.8, 1.1, 1.5]);
    session.selectGalleryCard(1.1);
    expect(session.lambda).toBe(1.1);
  });

  it("before/after toggles both ways", () => {
    const session = new SessionState();
    expect(session.compare).toBe("after");
    session.toggleCompare();
    expect(session.compare).toBe("before");
    session.toggleCompare();
    expect(session.compare).toBe("after");
  });

  it("a fresh init upload replaces the mask at the new resolution", () => {
    const session = readySession();
    expect(session.mask!.isEmpty()).toBe(false);
    session.setInitUpload({ sha256: "d".repeat(64), bytes: 5 }, "other.png", 48, 40);
    expect(session.mask!.width).toBe(48);
    expect(session.mask!.height).toBe(40);
    expect(session.mask!.isEmpty()).toBe(true);
  });
});
