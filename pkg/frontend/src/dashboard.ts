// DOM layer: connection banner, one panel per component with its tag table,
// heater indicator, setpoint forms and a trend chart per measurement.

import { GatewayApi } from "./api";
import type { ConnectionState } from "./stream";
import { TagStore } from "./store";
import { drawTrend } from "./trend";
import type { TagView } from "./types";

const TREND_WINDOW_S = 120;

export class Dashboard {
    private panels = new Map<string, HTMLElement>();
    private banner: HTMLElement;
    private content: HTMLElement;
    private inFlight = new Set<string>();
    private requestCounter = 0;
    private trendTag: string | null = null;
    private trendCanvas: HTMLCanvasElement;

    constructor(
        private root: HTMLElement,
        private store: TagStore,
        private api: GatewayApi,
    ) {
        this.banner = el("div", "banner hidden");
        this.banner.textContent = "connection lost - reconnecting...";
        const trendBox = el("section", "trend-box");
        const trendTitle = el("h2", "trend-title");
        trendTitle.textContent = "trend";
        this.trendCanvas = document.createElement("canvas");
        this.trendCanvas.width = 640;
        this.trendCanvas.height = 180;
        this.trendCanvas.className = "trend-canvas";
        trendBox.append(trendTitle, this.trendCanvas);
        this.content = el("main", "panels");
        this.root.append(this.banner, trendBox, this.content);
        this.store.subscribe(() => this.render());
    }

    setConnection(state: ConnectionState): void {
        this.banner.classList.toggle("hidden", state === "up");
        this.root.classList.toggle("disconnected", state !== "up");
    }

    showTrend(tag: string): void {
        this.trendTag = tag;
        const title = this.root.querySelector(".trend-title");
        if (title) title.textContent = `trend: ${tag} (last ${TREND_WINDOW_S}s)`;
        this.renderTrend();
    }

    render(): void {
        for (const [component, tags] of this.store.byComponent()) {
            let panel = this.panels.get(component);
            if (!panel) {
                panel = this.buildPanel(component);
                this.panels.set(component, panel);
                this.content.append(panel);
            }
            this.updatePanel(panel, tags);
        }
        this.renderTrend();
    }

    private buildPanel(component: string): HTMLElement {
        const panel = el("section", "panel");
        panel.dataset.component = component;
        const head = el("h2", "panel-title");
        head.textContent = component;
        const heater = el("span", "heater-indicator off");
        heater.title = "heater status";
        head.append(heater);
        const table = document.createElement("table");
        table.className = "tag-table";
        table.append(document.createElement("tbody"));
        panel.append(head, table);
        return panel;
    }

    private updatePanel(panel: HTMLElement, tags: TagView[]): void {
        const body = panel.querySelector("tbody")!;
        for (const tag of tags) {
            let row = panel.querySelector<HTMLTableRowElement>(
                `tr[data-tag="${tag.name}"]`);
            if (!row) {
                row = this.buildRow(tag);
                body.append(row);
            }
            this.updateRow(row, tag);
            if (tag.kind === "status") {
                const light = panel.querySelector(".heater-indicator")!;
                light.classList.toggle("on", tag.value === true);
                light.classList.toggle("off", tag.value !== true);
            }
        }
    }

    private buildRow(tag: TagView): HTMLTableRowElement {
        const row = document.createElement("tr");
        row.dataset.tag = tag.name;
        const name = document.createElement("td");
        name.className = "tag-name";
        name.textContent = tag.name;
        name.addEventListener("click", () => this.showTrend(tag.name));
        const value = document.createElement("td");
        value.className = "tag-value";
        const updated = document.createElement("td");
        updated.className = "tag-updated";
        const action = document.createElement("td");
        action.className = "tag-action";
        if (tag.kind === "setpoint") {
            action.append(this.buildForm(tag.name));
        }
        row.append(name, value, updated, action);
        return row;
    }

    private updateRow(row: HTMLTableRowElement, tag: TagView): void {
        const value = row.querySelector(".tag-value")!;
        if (tag.value === null) {
            value.textContent = "--";
        } else if (typeof tag.value === "boolean") {
            value.textContent = tag.value ? "ON" : "OFF";
        } else {
            value.textContent = `${tag.value.toFixed(1)} ${tag.units}`;
        }
        row.classList.toggle("stale", tag.stale);
        const updated = row.querySelector(".tag-updated")!;
        updated.textContent = `t+${(tag.ts_ns / 1e9).toFixed(1)}s`;
    }

    private buildForm(tagName: string): HTMLFormElement {
        const form = document.createElement("form");
        form.className = "setpoint-form";
        form.dataset.tag = tagName;
        const input = document.createElement("input");
        input.type = "number";
        input.step = "0.1";
        input.name = "value";
        const submit = document.createElement("button");
        submit.type = "submit";
        submit.textContent = "set";
        const status = el("span", "form-status");
        form.append(input, submit, status);
        form.addEventListener("submit", (event) => {
            event.preventDefault();
            void this.submitSetpoint(form, tagName, input.value);
        });
        return form;
    }

    /** One in-flight command per form; the result (or the 400 detail) is
     *  rendered inline next to the field. */
    async submitSetpoint(form: HTMLFormElement, tagName: string, raw: string): Promise<void> {
        const status = form.querySelector<HTMLElement>(".form-status")!;
        if (this.inFlight.has(tagName)) return;
        const value = Number(raw);
        if (!Number.isFinite(value)) {
            status.textContent = "enter a number";
            status.className = "form-status error";
            return;
        }
        this.inFlight.add(tagName);
        form.classList.add("busy");
        status.textContent = "sending...";
        status.className = "form-status pending";
        try {
            const requestId = `ui-${++this.requestCounter}`;
            const result = await this.api.postSetpoint(tagName, value, requestId);
            if (result.ok) {
                status.textContent = "ok";
                status.className = "form-status ok";
            } else {
                status.textContent = result.detail || `failed (${result.status})`;
                status.className = "form-status error";
            }
        } catch (err) {
            status.textContent = `failed: ${String(err)}`;
            status.className = "form-status error";
        } finally {
            this.inFlight.delete(tagName);
            form.classList.remove("busy");
        }
    }

    private renderTrend(): void {
        if (!this.trendTag) return;
        const samples = this.store.windowed(this.trendTag, TREND_WINDOW_S);
        const setpointTag = this.setpointFor(this.trendTag);
        const setpoint = setpointTag && typeof setpointTag.value === "number"
            ? setpointTag.value
            : null;
        drawTrend(this.trendCanvas, samples, setpoint, TREND_WINDOW_S);
    }

    private setpointFor(tagName: string): TagView | undefined {
        // plc1.pressure -> plc1.p_set, plc1.temperature -> plc1.t_set
        const [component, field] = splitTag(tagName);
        const mapping: Record<string, string> = { pressure: "p_set", temperature: "t_set" };
        const sp = mapping[field];
        return sp ? this.store.tags.get(`${component}.${sp}`) : undefined;
    }
}

function splitTag(name: string): [string, string] {
    const dot = name.lastIndexOf(".");
    return [name.slice(0, dot), name.slice(dot + 1)];
}

function el(tagName: string, className: string): HTMLElement {
    const node = document.createElement(tagName);
    node.className = className;
    return node;
}
