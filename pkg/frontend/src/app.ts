// Curation UI entry point. One item on screen at a time: both frames, the
// forged context, and the decision form. All state round-trips through the
// service; this file is only DOM wiring over api.ts and decision.ts.

import { ApiError, CurationApi, ItemPayload } from './api.js';
import {
  DecisionDraft,
  SeededOption,
  buildPayload,
  provenanceFor,
  seedOptions,
  validateDraft,
} from './decision.js';

const CATEGORIES = ['', 'PoseAction', 'ObjectAttribute', 'Numerical', 'Spatial'];

let api: CurationApi | null = null;
let current: ItemPayload | null = null;
let seeds: SeededOption[] = [];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setMessage(text: string, isError = false) {
  const box = el<HTMLElement>('message');
  box.textContent = text;
  box.className = isError ? 'message error' : 'message';
}

function showPanel(id: 'login-panel' | 'item-panel' | 'done-panel') {
  for (const panel of ['login-panel', 'item-panel', 'done-panel']) {
    el(panel).hidden = panel !== id;
  }
}

async function refreshProgress() {
  if (!api) return;
  try {
    const p = await api.progress();
    el('progress').textContent =
      `${p.accepted} accepted, ${p.rejected} rejected, ` +
      `${p.in_review} in review, ${p.queued} queued of ${p.total}`;
  } catch (err) {
    console.error('progress fetch failed', err);
  }
}

function draftFromForm(): DecisionDraft {
  const options: string[] = [];
  for (let i = 0; i < 4; i++) {
    options.push(el<HTMLInputElement>(`option-${i}`).value);
  }
  const picked = document.querySelector<HTMLInputElement>('input[name="answer"]:checked');
  return {
    question: el<HTMLTextAreaElement>('final-question').value,
    options,
    seeds,
    answerIndex: picked ? Number(picked.value) : null,
  };
}

function renderProvenanceTags() {
  const draft = draftFromForm();
  for (let i = 0; i < 4; i++) {
    el(`provenance-${i}`).textContent = provenanceFor(seeds[i], draft.options[i]);
  }
  const problems = validateDraft(draft);
  el<HTMLButtonElement>('accept-btn').disabled = problems.length > 0;
  el('draft-problems').textContent = problems.join('; ');
}

function renderItem(item: ItemPayload) {
  current = item;
  const candidate = item.candidate;
  seeds = seedOptions(candidate);

  el('qa-id').textContent = item.qa_id;
  el('item-meta').textContent =
    `${candidate.category} / ${candidate.source_view} view` +
    (item.take_id ? ` / ${item.take_id}` : '');
  if (item.images && api) {
    el<HTMLImageElement>('ego-image').src = api.imageUrl(item.images.ego);
    el<HTMLImageElement>('exo-image').src = api.imageUrl(item.images.exo);
  }

  const context = el('candidate-context');
  context.innerHTML = '';
  const rows: Array<[string, string]> = [
    ['initial', candidate.a_init],
    ['ego-only', candidate.a_ego],
    ['exo-only', candidate.a_exo],
    ['both views', candidate.a_both],
    ['text-only', candidate.a_text],
  ];
  for (const [label, value] of rows) {
    const dt = document.createElement('dt');
    dt.textContent = label;
    const dd = document.createElement('dd');
    dd.textContent = value || '(empty)';
    context.append(dt, dd);
  }

  el<HTMLTextAreaElement>('final-question').value = candidate.question;
  for (let i = 0; i < 4; i++) {
    el<HTMLInputElement>(`option-${i}`).value = seeds[i].text;
    el<HTMLInputElement>(`answer-${i}`).checked = false;
  }
  renderProvenanceTags();
  setMessage('');
  showPanel('item-panel');
}

async function loadNext() {
  if (!api) return;
  const category = el<HTMLSelectElement>('category-filter').value;
  try {
    const item = await api.nextItem(category || undefined);
    if (item === null) {
      current = null;
      showPanel('done-panel');
    } else {
      renderItem(item);
    }
    refreshProgress();
  } catch (err) {
    setMessage(describeError(err), true);
  }
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) {
    if (err.errors) {
      return Object.entries(err.errors)
        .map(([field, msg]) => `${field}: ${msg}`)
        .join('; ');
    }
    return err.message;
  }
  return String(err);
}

async function accept() {
  if (!api || !current) return;
  try {
    const payload = buildPayload(draftFromForm());
    await api.submitDecision(current.qa_id, payload);
    setMessage(`accepted ${current.qa_id}`);
    await loadNext();
  } catch (err) {
    setMessage(describeError(err), true);
  }
}

async function reject() {
  if (!api || !current) return;
  const reason = window.prompt('Reject reason (required):', '');
  if (reason === null) return;
  try {
    await api.reject(current.qa_id, reason);
    setMessage(`rejected ${current.qa_id}`);
    await loadNext();
  } catch (err) {
    setMessage(describeError(err), true);
  }
}

function start() {
  const name = el<HTMLInputElement>('annotator-input').value.trim();
  if (!name) {
    setMessage('enter your annotator name first', true);
    return;
  }
  window.localStorage.setItem('e3vqa-annotator', name);
  api = new CurationApi(name);
  el('who').textContent = name;
  el<HTMLAnchorElement>('export-link').href = api.exportUrl();
  loadNext();
}

function init() {
  console.log('e3vqa curation UI starting');
  const filter = el<HTMLSelectElement>('category-filter');
  for (const category of CATEGORIES) {
    const option = document.createElement('option');
    option.value = category;
    option.textContent = category || 'all categories';
    filter.append(option);
  }

  el<HTMLInputElement>('annotator-input').value =
    window.localStorage.getItem('e3vqa-annotator') || '';
  el('start-btn').addEventListener('click', start);
  el('annotator-input').addEventListener('keydown', (event) => {
    if ((event as KeyboardEvent).key === 'Enter') start();
  });
  el('accept-btn').addEventListener('click', accept);
  el('reject-btn').addEventListener('click', reject);
  el('skip-btn').addEventListener('click', loadNext);
  el('again-btn').addEventListener('click', loadNext);
  filter.addEventListener('change', () => {
    if (api) loadNext();
  });

  el<HTMLTextAreaElement>('final-question').addEventListener('input', renderProvenanceTags);
  for (let i = 0; i < 4; i++) {
    el(`option-${i}`).addEventListener('input', renderProvenanceTags);
    el(`answer-${i}`).addEventListener('change', renderProvenanceTags);
  }
  showPanel('login-panel');
}

init();
