// Thin typed wrapper over the gateway's HTTP API. The UI touches the
// simulation only through these calls; everything else is a read.

import type { SetpointResult, TagView, Topology } from "./types";

export class GatewayApi {
    constructor(private base: string = "") {}

    async fetchTags(): Promise<{ ts_ns: number; tags: TagView[] }> {
        const resp = await fetch(`${this.base}/api/tags`);
        if (!resp.ok) throw new Error(`tags request failed: ${resp.status}`);
        return resp.json();
    }

    async fetchTopology(): Promise<Topology> {
        const resp = await fetch(`${this.base}/api/topology`);
        if (!resp.ok) throw new Error(`topology request failed: ${resp.status}`);
        return resp.json();
    }

    /** POST a setpoint command; resolves for 200/400/409/502 alike so the
     *  form can render the failure inline instead of throwing. */
    async postSetpoint(tag: string, value: number, requestId: string): Promise<SetpointResult> {
        const resp = await fetch(`${this.base}/api/setpoints`, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify({ tag, value, request_id: requestId }),
        });
        const body = await resp.json().catch(() => ({ ok: false, detail: "bad response" }));
        return {
            ok: Boolean(body.ok),
            request_id: body.request_id ?? requestId,
            detail: body.detail ?? "",
            status: resp.status,
        };
    }
}
