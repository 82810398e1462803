/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_fit_free: (a: number, b: number) => void;
export const __wbg_scene_free: (a: number, b: number) => void;
export const fit_accuracy: (a: number) => number;
export const fit_ambiguity: (a: number) => [number, number];
export const fit_labels: (a: number) => [number, number];
export const fit_losses: (a: number) => [number, number];
export const marginFor: (a: number, b: number, c: number) => number;
export const scene_ambiguity: (a: number, b: number, c: number) => [number, number, number, number];
export const scene_classes: (a: number) => number;
export const scene_fit: (a: number, b: number, c: number) => [number, number, number];
export const scene_is_empty: (a: number) => number;
export const scene_labels: (a: number) => [number, number];
export const scene_len: (a: number) => number;
export const scene_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const scene_positions: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
