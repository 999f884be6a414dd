// In-memory tag store: latest snapshot plus a bounded per-tag history used
// by the trend view. Subscribers re-render on every snapshot.

import type { TagView, TagsMessage } from "./types";

export interface Sample {
    ts_ns: number;
    value: number;
}

const HISTORY_LIMIT = 600; // ten minutes of 1 Hz samples

export class TagStore {
    tags = new Map<string, TagView>();
    history = new Map<string, Sample[]>();
    lastSnapshotTs = 0;
    private listeners: (() => void)[] = [];

    subscribe(listener: () => void): void {
        this.listeners.push(listener);
    }

    applySnapshot(message: TagsMessage): void {
        this.lastSnapshotTs = message.ts_ns;
        for (const tag of message.tags) {
            this.tags.set(tag.name, tag);
            if (typeof tag.value === "number") {
                const series = this.history.get(tag.name) ?? [];
                const last = series[series.length - 1];
                if (!last || last.ts_ns !== tag.ts_ns) {
                    series.push({ ts_ns: tag.ts_ns, value: tag.value });
                    if (series.length > HISTORY_LIMIT) series.shift();
                }
                this.history.set(tag.name, series);
            }
        }
        for (const listener of this.listeners) listener();
    }

    /** Tags grouped by owning component, components sorted by name. */
    byComponent(): Map<string, TagView[]> {
        const grouped = new Map<string, TagView[]>();
        for (const tag of this.tags.values()) {
            const list = grouped.get(tag.component_id) ?? [];
            list.push(tag);
            grouped.set(tag.component_id, list);
        }
        for (const list of grouped.values()) {
            list.sort((a, b) => a.name.localeCompare(b.name));
        }
        return new Map([...grouped.entries()].sort((a, b) => a[0].localeCompare(b[0])));
    }

    /** History samples for one tag within the trailing window. */
    windowed(tag: string, windowS: number): Sample[] {
        const series = this.history.get(tag) ?? [];
        if (series.length === 0) return [];
        const latest = series[series.length - 1].ts_ns;
        const cutoff = latest - windowS * 1e9;
        return series.filter((s) => s.ts_ns >= cutoff);
    }
}
