import { ApiClient } from "./api.js";
import { ReviewStore } from "./store.js";
import { ConsoleUi } from "./ui.js";

const api = new ApiClient("");
const store = new ReviewStore(api);
const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

const ui = new ConsoleUi(root, store, api);
ui.render();

void (async () => {
  await store.loadQueue();
  await store.refreshStatus();
  store.start();
})();
