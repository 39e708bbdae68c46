// Decision-form logic kept free of the DOM so it can be unit tested: option
// seeding from the candidate, provenance tracking across annotator edits, and
// client-side validation mirroring the server's rules.

import type { CandidateInfo, DecisionPayload } from './api.js';

export type Provenance =
  | 'FromEgoAnswer'
  | 'FromExoAnswer'
  | 'FromBothAnswer'
  | 'FromTextAnswer'
  | 'FromEgoOptionSet'
  | 'FromExoOptionSet'
  | 'AnnotatorEdited';

export interface SeededOption {
  text: string;
  provenance: Provenance;
}

const ANSWER_SOURCES: Array<[keyof CandidateInfo, Provenance]> = [
  ['a_ego', 'FromEgoAnswer'],
  ['a_exo', 'FromExoAnswer'],
  ['a_both', 'FromBothAnswer'],
  ['a_text', 'FromTextAnswer'],
];

// Prefer a forged option set (ego first, then exo); fall back to the four
// per-condition answers, deduplicated, padded with blanks for the annotator.
export function seedOptions(candidate: CandidateInfo): SeededOption[] {
  const sets = candidate.option_sets || {};
  if (Array.isArray(sets.ego) && sets.ego.length === 4) {
    return sets.ego.map((text) => ({ text, provenance: 'FromEgoOptionSet' as const }));
  }
  if (Array.isArray(sets.exo) && sets.exo.length === 4) {
    return sets.exo.map((text) => ({ text, provenance: 'FromExoOptionSet' as const }));
  }
  const seeds: SeededOption[] = [];
  const seen = new Set<string>();
  for (const [field, provenance] of ANSWER_SOURCES) {
    const text = String(candidate[field] || '').trim();
    const key = text.toLowerCase();
    if (!text || seen.has(key)) continue;
    seen.add(key);
    seeds.push({ text, provenance });
  }
  while (seeds.length < 4) {
    seeds.push({ text: '', provenance: 'AnnotatorEdited' });
  }
  return seeds.slice(0, 4);
}

// An option keeps its seeded provenance as long as the text is untouched
// (modulo surrounding whitespace); any real edit makes it AnnotatorEdited,
// and typing the original back restores the seed's tag.
export function provenanceFor(seed: SeededOption, currentText: string): Provenance {
  return currentText.trim() === seed.text.trim() ? seed.provenance : 'AnnotatorEdited';
}

export interface DecisionDraft {
  question: string;
  options: string[];
  seeds: SeededOption[];
  answerIndex: number | null;
}

// Mirrors the server-side checks so the form can complain before a round
// trip; the server remains the authority.
export function validateDraft(draft: DecisionDraft): string[] {
  const problems: string[] = [];
  if (!draft.question.trim()) {
    problems.push('the question must not be empty');
  }
  const trimmed = draft.options.map((opt) => opt.trim());
  if (trimmed.length !== 4 || trimmed.some((opt) => !opt)) {
    problems.push('all four options must be filled in');
  }
  if (new Set(trimmed).size !== trimmed.length) {
    problems.push('options must be distinct');
  }
  if (draft.answerIndex === null || draft.answerIndex < 0 || draft.answerIndex > 3) {
    problems.push('pick the correct option');
  }
  return problems;
}

export function buildPayload(draft: DecisionDraft, decidedAt?: string): DecisionPayload {
  const problems = validateDraft(draft);
  if (problems.length) {
    throw new Error(`draft not ready: ${problems.join('; ')}`);
  }
  return {
    final_question: draft.question.trim(),
    final_options: draft.options.map((opt) => opt.trim()),
    answer_index: draft.answerIndex as number,
    option_provenance: draft.options.map((opt, i) => provenanceFor(draft.seeds[i], opt)),
    // an explicit timestamp makes a network retry of the same payload
    // idempotent on the server instead of a 409
    decided_at: decidedAt || new Date().toISOString(),
  };
}
