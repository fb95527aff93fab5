import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // The e2e file boots a real service process and runs sampling jobs.
    testTimeout: 60000,
    hookTimeout: 60000,
  },
});
