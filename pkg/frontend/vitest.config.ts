import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // the integration suite spawns the Python service and waits for it
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
