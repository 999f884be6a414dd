// WebSocket stream with a heartbeat watchdog and automatic reconnect.
//
// The gateway ticks tag snapshots at 1 Hz; if nothing arrives inside the
// heartbeat window the connection is declared down (the dashboard shows its
// banner) and reconnection attempts begin. Recovery needs no page reload.

import type { StreamMessage } from "./types";

export type ConnectionState = "connecting" | "up" | "down";

type MessageHandler = (msg: StreamMessage) => void;
type StateHandler = (state: ConnectionState) => void;

export interface StreamOptions {
    heartbeatMs?: number;
    reconnectMs?: number;
    socketFactory?: (url: string) => WebSocket;
}

export class TagStream {
    readonly heartbeatMs: number;
    readonly reconnectMs: number;
    state: ConnectionState = "connecting";

    private socketFactory: (url: string) => WebSocket;
    private ws: WebSocket | null = null;
    private messageHandlers: MessageHandler[] = [];
    private stateHandlers: StateHandler[] = [];
    private watchdog: ReturnType<typeof setTimeout> | null = null;
    private retryTimer: ReturnType<typeof setTimeout> | null = null;
    private closed = false;

    constructor(private url: string, options: StreamOptions = {}) {
        this.heartbeatMs = options.heartbeatMs ?? 3000;
        this.reconnectMs = options.reconnectMs ?? 1000;
        this.socketFactory = options.socketFactory ?? ((u) => new WebSocket(u));
    }

    onMessage(handler: MessageHandler): void {
        this.messageHandlers.push(handler);
    }

    onState(handler: StateHandler): void {
        this.stateHandlers.push(handler);
    }

    connect(): void {
        if (this.closed) return;
        this.setState(this.state === "down" ? "down" : "connecting");
        const ws = this.socketFactory(this.url);
        this.ws = ws;
        ws.onopen = () => {
            // Up only once data flows; an open socket with a silent gateway
            // still trips the watchdog.
            this.armWatchdog();
        };
        ws.onmessage = (event: MessageEvent) => {
            this.setState("up");
            this.armWatchdog();
            let parsed: StreamMessage;
            try {
                parsed = JSON.parse(String(event.data));
            } catch {
                return;
            }
            for (const handler of this.messageHandlers) handler(parsed);
        };
        ws.onclose = () => this.dropped();
        ws.onerror = () => {
            try {
                ws.close();
            } catch {
                /* already closing */
            }
        };
    }

    close(): void {
        this.closed = true;
        if (this.watchdog) clearTimeout(this.watchdog);
        if (this.retryTimer) clearTimeout(this.retryTimer);
        this.ws?.close();
    }

    private armWatchdog(): void {
        if (this.watchdog) clearTimeout(this.watchdog);
        this.watchdog = setTimeout(() => {
            // Stale stream: force the socket down so reconnect logic runs.
            try {
                this.ws?.close();
            } catch {
                /* ignore */
            }
            this.dropped();
        }, this.heartbeatMs);
    }

    private dropped(): void {
        if (this.closed) return;
        if (this.watchdog) {
            clearTimeout(this.watchdog);
            this.watchdog = null;
        }
        this.setState("down");
        if (this.retryTimer) return; // one pending retry at a time
        this.retryTimer = setTimeout(() => {
            this.retryTimer = null;
            this.connect();
        }, this.reconnectMs);
    }

    private setState(state: ConnectionState): void {
        if (state === this.state) return;
        this.state = state;
        for (const handler of this.stateHandlers) handler(state);
    }
}
