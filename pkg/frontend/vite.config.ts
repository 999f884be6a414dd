import { defineConfig } from "vitest/config";

export default defineConfig({
    server: {
        proxy: {
            "/api": {
                target: "http://127.0.0.1:8700",
                ws: true,
            },
        },
    },
    test: {
        environment: "jsdom",
        include: ["tests/**/*.test.ts"],
        testTimeout: 30000,
        hookTimeout: 60000,
    },
});
