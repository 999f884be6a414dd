import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { TagStream } from "../src/stream";
import type { ConnectionState } from "../src/stream";

class FakeSocket {
    static instances: FakeSocket[] = [];
    onopen: (() => void) | null = null;
    onmessage: ((event: { data: string }) => void) | null = null;
    onclose: (() => void) | null = null;
    onerror: (() => void) | null = null;
    closed = false;

    constructor(public url: string) {
        FakeSocket.instances.push(this);
    }

    open(): void {
        this.onopen?.();
    }

    emit(data: unknown): void {
        this.onmessage?.({ data: JSON.stringify(data) });
    }

    close(): void {
        if (this.closed) return;
        this.closed = true;
        this.onclose?.();
    }
}

function makeStream(heartbeatMs = 3000, reconnectMs = 1000) {
    FakeSocket.instances = [];
    const states: ConnectionState[] = [];
    const messages: unknown[] = [];
    const stream = new TagStream("ws://test/api/stream", {
        heartbeatMs,
        reconnectMs,
        socketFactory: (url) => new FakeSocket(url) as unknown as WebSocket,
    });
    stream.onState((s) => states.push(s));
    stream.onMessage((m) => messages.push(m));
    return { stream, states, messages };
}

describe("TagStream", () => {
    beforeEach(() => vi.useFakeTimers());
    afterEach(() => vi.useRealTimers());

    it("goes up when data flows", () => {
        const { stream, states, messages } = makeStream();
        stream.connect();
        const socket = FakeSocket.instances[0];
        socket.open();
        socket.emit({ type: "tags", ts_ns: 1, tags: [] });
        expect(stream.state).toBe("up");
        expect(states).toContain("up");
        expect(messages.length).toBe(1);
        stream.close();
    });

    it("declares the connection down within the heartbeat window", () => {
        const { stream } = makeStream(3000, 1000);
        stream.connect();
        const socket = FakeSocket.instances[0];
        socket.open();
        socket.emit({ type: "tags", ts_ns: 1, tags: [] });
        expect(stream.state).toBe("up");
        vi.advanceTimersByTime(3001); // silent gateway trips the watchdog
        expect(stream.state).toBe("down");
        stream.close();
    });

    it("reconnects automatically and recovers without reload", () => {
        const { stream, states } = makeStream(3000, 1000);
        stream.connect();
        const first = FakeSocket.instances[0];
        first.open();
        first.emit({ type: "tags", ts_ns: 1, tags: [] });
        first.close(); // gateway restart
        expect(stream.state).toBe("down");
        vi.advanceTimersByTime(1001);
        expect(FakeSocket.instances.length).toBe(2);
        const second = FakeSocket.instances[1];
        second.open();
        second.emit({ type: "tags", ts_ns: 2, tags: [] });
        expect(stream.state).toBe("up");
        expect(states).toEqual(["up", "down", "up"]);
        stream.close();
    });

    it("keeps retrying while the gateway stays away", () => {
        const { stream } = makeStream(3000, 1000);
        stream.connect();
        FakeSocket.instances[0].close();
        vi.advanceTimersByTime(1001);
        FakeSocket.instances[1].close();
        vi.advanceTimersByTime(1001);
        expect(FakeSocket.instances.length).toBe(3);
        stream.close();
    });

    it("ignores malformed frames", () => {
        const { stream, messages } = makeStream();
        stream.connect();
        const socket = FakeSocket.instances[0];
        socket.open();
        socket.onmessage?.({ data: "{not json" });
        expect(messages).toEqual([]);
        stream.close();
    });

    it("close() stops reconnect attempts", () => {
        const { stream } = makeStream(3000, 1000);
        stream.connect();
        FakeSocket.instances[0].close();
        stream.close();
        vi.advanceTimersByTime(5000);
        expect(FakeSocket.instances.length).toBe(1);
    });
});
