// DOM wiring for the single-page client. All state lives in the controller
// modules; this file only binds them to elements in index.html.

import { ApiClient, ImageQuery, PolicyInfo } from "./api.js";
import { ProcessingCart } from "./cart.js";
import { MonitorTable } from "./monitor.js";
import { ImageSelector, SelectorState } from "./selector.js";
import { EventStream } from "./sse.js";
import { TagDragDrop } from "./tags.js";

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing element #${id}`);
  return found as T;
}

const api = new ApiClient(window.location.origin);

// -- login -----------------------------------------------------------------

async function login(): Promise<void> {
  const loginName = el<HTMLInputElement>("login").value;
  const password = el<HTMLInputElement>("password").value;
  await api.login(loginName, password);
  el("login-panel").style.display = "none";
  el("main-panel").style.display = "block";
  await selector.refresh();
  await selector.refreshSavedSelections();
  await refreshTags();
  await refreshNodes();
  startMonitoring();
}

// -- selector ----------------------------------------------------------------

function renderSelector(state: SelectorState): void {
  el("result-count").textContent = String(state.count);
  el("selector-error").textContent = state.error ?? "";
  el("current-selection").textContent = state.currentSelectionName ?? "(none)";
  const grid = el<HTMLTableSectionElement>("image-grid");
  grid.innerHTML = "";
  for (const image of state.results.slice(0, 200)) {
    const row = grid.insertRow();
    row.insertCell().textContent = image.filename;
    row.insertCell().textContent = image.run_id ?? "-";
    row.insertCell().textContent = image.filter ?? "-";
    row.insertCell().textContent = image.grade ?? "-";
    row.insertCell().textContent = image.tags.join(" ");
  }
  const saved = el<HTMLSelectElement>("saved-selections");
  saved.innerHTML = "";
  for (const selection of state.savedSelections) {
    const option = document.createElement("option");
    option.value = selection.selection_id;
    option.textContent = `${selection.name} (${selection.count})`;
    option.dataset["name"] = selection.name;
    saved.appendChild(option);
  }
}

const selector = new ImageSelector(api, renderSelector);

const criterionInputs: [string, keyof ImageQuery][] = [
  ["crit-run-id", "run_id"],
  ["crit-filter", "filter"],
  ["crit-instrument", "instrument"],
  ["crit-grade", "grade"],
  ["crit-tag", "tag"],
  ["crit-glob", "filename_glob"],
];

// -- tags ------------------------------------------------------------------------

const tagDrag = new TagDragDrop(
  api,
  () => selector.visibleIds(),
  (tag, affected, mode) => {
    el("tag-result").textContent =
      `${mode === "mark" ? "marked" : "unmarked"} "${tag}": ${affected} image(s) affected`;
    void selector.refresh();
  },
  (message) => {
    el("tag-result").textContent = message;
  },
);

async function refreshTags(): Promise<void> {
  const tags = await api.tags();
  const shelf = el("tag-shelf");
  shelf.innerHTML = "";
  for (const tag of tags) {
    const chip = document.createElement("span");
    chip.className = "tag-chip";
    chip.textContent = tag.name;
    chip.draggable = true;
    chip.addEventListener("dragstart", () => tagDrag.beginDrag(tag.name));
    chip.addEventListener("dragend", () => tagDrag.dropOutside());
    shelf.appendChild(chip);
  }
}

// -- cart ---------------------------------------------------------------------------

const cart = new ProcessingCart((current) => {
  const list = el("cart-list");
  list.innerHTML = "";
  current.pending.forEach((item, index) => {
    const entry = document.createElement("li");
    entry.textContent = `${item.pluginId} over ${item.selectionId ?? "explicit list"}`;
    const remove = document.createElement("button");
    remove.textContent = "remove";
    remove.addEventListener("click", () => cart.remove(index));
    entry.appendChild(remove);
    list.appendChild(entry);
  });
});

// -- monitoring -------------------------------------------------------------------------

const monitor = new MonitorTable(api, (table) => {
  const body = el<HTMLTableSectionElement>("monitor-body");
  body.innerHTML = "";
  for (const row of table.rows.values()) {
    const tr = body.insertRow();
    tr.insertCell().textContent = String(row.jobId);
    tr.insertCell().textContent = row.description;
    tr.insertCell().textContent = row.remoteHost;
    tr.insertCell().textContent = row.runningTime.toFixed(1);
    tr.insertCell().textContent = row.owner;
    tr.insertCell().textContent = row.status;
    const actions = tr.insertCell();
    if (row.status === "QUEUED" || row.status === "RUNNING") {
      const cancel = document.createElement("button");
      cancel.textContent = "cancel";
      cancel.addEventListener("click", () => void monitor.cancel(row.jobId));
      actions.appendChild(cancel);
    }
  }
  el("monitor-error").textContent = table.error ?? "";
});

let stream: EventStream | null = null;

function startMonitoring(): void {
  stream = new EventStream({
    baseUrl: window.location.origin,
    token: api.getToken() ?? "",
    onEvent: (event) => monitor.applyEvent(event),
    onStatus: (status) => {
      el("stream-status").textContent = status;
    },
  });
  void stream.start(0);
  // local running-time ticking between events
  setInterval(() => monitor.tick(1), 1000);
}

// -- node requirements setup -----------------------------------------------------------------

async function refreshNodes(): Promise<void> {
  const nodes = await api.nodes();
  const picker = el("static-node-picker");
  picker.innerHTML = "";
  for (const node of nodes) {
    const label = document.createElement("label");
    const box = document.createElement("input");
    box.type = "checkbox";
    box.value = node.name;
    label.appendChild(box);
    label.append(` ${node.name} (${node.slots} slots, ${node.running} running)`);
    picker.appendChild(label);
  }
  const policies = await api.policies();
  renderPolicies(policies);
}

function renderPolicies(policies: PolicyInfo[]): void {
  const list = el("policy-list");
  list.innerHTML = "";
  for (const policy of policies) {
    const entry = document.createElement("li");
    if (policy.kind === "dynamic") {
      const parts = (policy.criteria ?? [])
        .map((c) => `${c.attribute} ${c.op} ${c.pattern}`)
        .join(" AND ");
      entry.textContent = `dynamic ${policy.label}: ${parts || "(match all)"}`;
    } else {
      entry.textContent = `static ${policy.label}: ${(policy.node_names ?? []).join(", ")}`;
    }
    list.appendChild(entry);
  }
}

// -- event bindings ------------------------------------------------------------------------------

export function bind(): void {
  el("login-button").addEventListener("click", () => void login());
  for (const [id, key] of criterionInputs) {
    el<HTMLInputElement>(id).addEventListener("change", (ev) => {
      const value = (ev.target as HTMLInputElement).value;
      void selector.setCriterion(key, value);
    });
  }
  el("clear-criteria").addEventListener("click", () => void selector.clearCriteria());
  el("load-selection").addEventListener("click", () => {
    const saved = el<HTMLSelectElement>("saved-selections");
    const name = saved.selectedOptions[0]?.dataset["name"];
    if (name) void selector.loadSavedSelection(name);
  });
  el("save-selection").addEventListener("click", () => {
    const name = el<HTMLInputElement>("selection-name").value;
    if (name) void selector.saveCurrentAs(name);
  });
  el("merge-selections").addEventListener("click", () => {
    const saved = el<HTMLSelectElement>("saved-selections");
    const sources = Array.from(saved.selectedOptions).map((option) => option.value);
    const target = el<HTMLInputElement>("selection-name").value;
    if (target && sources.length > 0) void selector.mergeSelections(target, sources);
  });
  el("delete-selection").addEventListener("click", () => {
    const saved = el<HTMLSelectElement>("saved-selections");
    const id = saved.selectedOptions[0]?.value;
    if (id) void selector.deleteSelection(id);
  });

  const zone = el("tag-drop-zone");
  zone.addEventListener("dragover", (ev) => ev.preventDefault());
  zone.addEventListener("drop", (ev) => {
    ev.preventDefault();
    const mode = el<HTMLSelectElement>("tag-mode").value === "unmark" ? "unmark" : "mark";
    void tagDrag.dropOnZone(mode);
  });

  el("cart-add").addEventListener("click", () => {
    const plugin = el<HTMLInputElement>("cart-plugin").value;
    const config = el<HTMLInputElement>("cart-config").value;
    const selectionId = el<HTMLSelectElement>("saved-selections").selectedOptions[0]?.value;
    if (plugin && config && selectionId) {
      cart.add({ pluginId: plugin, configId: config, selectionId });
    }
  });
  el("cart-submit").addEventListener("click", () => {
    const policy = el<HTMLInputElement>("submit-policy").value || undefined;
    void cart.submitAll(api, policy);
  });

  el("tab-dynamic").addEventListener("click", () => {
    el("dynamic-editor").style.display = "block";
    el("static-picker-panel").style.display = "none";
  });
  el("tab-static").addEventListener("click", () => {
    el("dynamic-editor").style.display = "none";
    el("static-picker-panel").style.display = "block";
  });
  el("policy-create").addEventListener("click", () => {
    const label = el<HTMLInputElement>("policy-label").value;
    const attribute = el<HTMLInputElement>("policy-attribute").value;
    const op = el<HTMLSelectElement>("policy-op").value;
    const pattern = el<HTMLInputElement>("policy-pattern").value;
    if (label && attribute && pattern) {
      void api
        .createDynamicPolicy(label, [{ attribute, op, pattern }])
        .then(() => refreshNodes());
    }
  });
  el("static-create").addEventListener("click", () => {
    const label = el<HTMLInputElement>("static-label").value;
    const picked = Array.from(
      el("static-node-picker").querySelectorAll<HTMLInputElement>("input:checked"),
    ).map((box) => box.value);
    if (label && picked.length > 0) {
      void api.createStaticSelection(label, picked).then(() => refreshNodes());
    }
  });
}

if (typeof document !== "undefined" && document.readyState !== "loading") {
  bind();
} else if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", bind);
}
