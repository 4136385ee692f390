/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_sandbox_free: (a: number, b: number) => void;
export const ball_in_view: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => number;
export const fit_turn: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const fov_footprint: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const sandbox_new: (a: bigint) => [number, number, number];
export const sandbox_place_ball: (a: number, b: number, c: number) => [number, number];
export const sandbox_reset: (a: number, b: number, c: number) => [number, number];
export const sandbox_set_command: (a: number, b: number, c: number) => void;
export const sandbox_state_json: (a: number) => [number, number];
export const sandbox_step: (a: number, b: number) => [number, number];
export const sandbox_time: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
