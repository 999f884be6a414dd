export type TagKind = "measurement" | "setpoint" | "status";

export interface TagView {
    name: string;
    component_id: string;
    kind: TagKind;
    value: number | boolean | null;
    units: string;
    ts_ns: number;
    stale: boolean;
}

export interface TagsMessage {
    type: "tags";
    ts_ns: number;
    tags: TagView[];
}

export interface CommandResultMessage {
    type: "command_result";
    ok: boolean;
    request_id: string;
    detail: string;
}

export type StreamMessage = TagsMessage | CommandResultMessage;

export interface TopologyNode {
    id: string;
    kind: "Plant" | "PLC" | "HMI" | "Attacker";
    address: string;
    segments: string[];
}

export interface Topology {
    nodes: TopologyNode[];
    links: { id: string; a: string; b: string; segment: string }[];
    segments: Record<string, string[]>;
}

export interface SetpointResult {
    ok: boolean;
    request_id: string;
    detail: string;
    status: number;
}
