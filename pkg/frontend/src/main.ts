import { GatewayApi } from "./api";
import { Dashboard } from "./dashboard";
import { TagStore } from "./store";
import { TagStream } from "./stream";
import "./style.css";

const api = new GatewayApi("");
const store = new TagStore();
const root = document.getElementById("app")!;
const dashboard = new Dashboard(root, store, api);

const wsUrl = `${location.origin.replace(/^http/, "ws")}/api/stream`;
const stream = new TagStream(wsUrl);

stream.onState((state) => dashboard.setConnection(state));
stream.onMessage((message) => {
    if (message.type === "tags") {
        store.applySnapshot(message);
    }
});
stream.connect();

// Seed the view before the first stream tick.
api.fetchTags()
    .then((snapshot) => store.applySnapshot({ type: "tags", ...snapshot }))
    .catch(() => {
        /* stream reconnect will repopulate */
    });

// Default trend: first measurement tag to appear.
const pickDefaultTrend = () => {
    for (const tag of store.tags.values()) {
        if (tag.kind === "measurement") {
            dashboard.showTrend(tag.name);
            return true;
        }
    }
    return false;
};
const trendPoll = setInterval(() => {
    if (pickDefaultTrend()) clearInterval(trendPoll);
}, 500);
