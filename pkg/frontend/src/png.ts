// Self-contained PNG writer, enough for mask upload: 8-bit grayscale or
// RGB, filter 0 on every scanline, zlib stream built from stored
// (uncompressed) deflate blocks. Masks are tiny and incompressible noise
// compresses badly anyway, so stored blocks keep this dependency-free
// and byte-deterministic. Plus a header parser for reading dimensions
// back out of server results.

const SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

export function crc32(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < bytes.length; i++) {
    c = CRC_TABLE[(c ^ bytes[i]!) & 0xff]! ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

export function adler32(bytes: Uint8Array): number {
  let a = 1;
  let b = 0;
  for (let i = 0; i < bytes.length; i++) {
    a = (a + bytes[i]!) % 65521;
    b = (b + a) % 65521;
  }
  return ((b << 16) | a) >>> 0;
}

function u32be(value: number): Uint8Array {
  return new Uint8Array([
    (value >>> 24) & 0xff, (value >>> 16) & 0xff, (value >>> 8) & 0xff, value & 0xff,
  ]);
}

function chunk(type: string, body: Uint8Array): Uint8Array {
  const tag = new Uint8Array(4);
  for (let i = 0; i < 4; i++) tag[i] = type.charCodeAt(i);
  const payload = new Uint8Array(4 + body.length);
  payload.set(tag, 0);
  payload.set(body, 4);
  const out = new Uint8Array(4 + payload.length + 4);
  out.set(u32be(body.length), 0);
  out.set(payload, 4);
  out.set(u32be(crc32(payload)), 4 + payload.length);
  return out;
}

/** zlib wrapper around stored deflate blocks (max 65535 bytes each). */
export function zlibStored(raw: Uint8Array): Uint8Array {
  const blocks: Uint8Array[] = [new Uint8Array([0x78, 0x01])];
  const blockSize = 65535;
  const count = Math.max(1, Math.ceil(raw.length / blockSize));
  for (let i = 0; i < count; i++) {
    const start = i * blockSize;
    const part = raw.subarray(start, Math.min(start + blockSize, raw.length));
    const header = new Uint8Array(5);
    header[0] = i === count - 1 ? 1 : 0; // BFINAL, BTYPE=00
    header[1] = part.length & 0xff;
    header[2] = (part.length >>> 8) & 0xff;
    header[3] = ~part.length & 0xff;
    header[4] = (~part.length >>> 8) & 0xff;
    blocks.push(header, part);
  }
  blocks.push(u32be(adler32(raw)));
  let total = 0;
  for (const b of blocks) total += b.length;
  const out = new Uint8Array(total);
  let at = 0;
  for (const b of blocks) {
    out.set(b, at);
    at += b.length;
  }
  return out;
}

export type PngChannels = 1 | 3;

export function encodePng(
  pixels: Uint8Array, width: number, height: number, channels: PngChannels,
): Uint8Array {
  if (pixels.length !== width * height * channels) {
    throw new Error(
      `pixel payload is ${pixels.length} bytes, expected ${width * height * channels}`,
    );
  }
  const ihdr = new Uint8Array(13);
  ihdr.set(u32be(width), 0);
  ihdr.set(u32be(height), 4);
  ihdr[8] = 8; // bit depth
  ihdr[9] = channels === 1 ? 0 : 2; // grayscale / truecolor
  // compression, filter, interlace stay 0

  const stride = width * channels;
  const raw = new Uint8Array((stride + 1) * height);
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0; // filter type none
    raw.set(pixels.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }

  const parts = [
    new Uint8Array(SIGNATURE),
    chunk("IHDR", ihdr),
    chunk("IDAT", zlibStored(raw)),
    chunk("IEND", new Uint8Array(0)),
  ];
  let total = 0;
  for (const p of parts) total += p.length;
  const out = new Uint8Array(total);
  let at = 0;
  for (const p of parts) {
    out.set(p, at);
    at += p.length;
  }
  return out;
}

/** Binary 0/1 mask bytes to the single-channel PNG the service expects. */
export function encodeMaskPng(binary: Uint8Array, width: number, height: number): Uint8Array {
  const gray = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) {
    gray[i] = binary[i]! > 0 ? 255 : 0;
  }
  return encodePng(gray, width, height, 1);
}

export interface PngHeader {
  width: number;
  height: number;
  bitDepth: number;
  colorType: number;
}

export function pngHeader(bytes: Uint8Array): PngHeader {
  if (bytes.length < 33) throw new Error("not a PNG: too short");
  for (let i = 0; i < SIGNATURE.length; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG: bad signature");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  if (view.getUint32(8) !== 13) throw new Error("not a PNG: bad IHDR length");
  const tag = String.fromCharCode(bytes[12]!, bytes[13]!, bytes[14]!, bytes[15]!);
  if (tag !== "IHDR") throw new Error("not a PNG: IHDR missing");
  return {
    width: view.getUint32(16),
    height: view.getUint32(20),
    bitDepth: bytes[24]!,
    colorType: bytes[25]!,
  };
}
