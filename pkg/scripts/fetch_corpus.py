#!/usr/bin/env python3
"""Download a public-domain multi-domain desk corpus and encode it.

Each domain concatenates a few Project Gutenberg texts (at least 1 MiB per
domain).  Writes ``<domain>.tok`` files plus ``mixture.txt`` into OUT_DIR.
If any download fails, falls back to the offline corpus built from the
Python standard library sources (``eslm encode-corpus --local``).

    python3 scripts/fetch_corpus.py data/desk
    eslm train --profile desk --set data.manifest=data/desk/mixture.txt
"""

from __future__ import annotations

import argparse
import logging
import sys
import urllib.request
from pathlib import Path

from eslm.data import encode_corpus, write_local_corpus

URL = "https://www.gutenberg.org/cache/epub/{id}/pg{id}.txt"
DOMAINS = {
    "fiction": [1342, 2701, 98, 1400],
    "science": [1228, 2009, 33283, 4363],
    "philosophy": [3300, 1497, 4280, 5827],
}

log = logging.getLogger("fetch_corpus")


def _strip_boilerplate(text: bytes) -> bytes:
    start, end = text.find(b"*** START OF"), text.find(b"*** END OF")
    if start != -1:
        start = text.find(b"\n", start) + 1
    return text[max(start, 0) : end if end != -1 else len(text)]


def fetch(book_id: int, timeout: float) -> bytes:
    with urllib.request.urlopen(URL.format(id=book_id), timeout=timeout) as resp:
        return _strip_boilerplate(resp.read())


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--min-bytes", type=int, default=1 << 20, help="minimum bytes per domain")
    ap.add_argument("--timeout", type=float, default=30.0)
    ap.add_argument("--offline", action="store_true", help="skip downloads and write the local corpus")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if not args.offline:
        try:
            lines = []
            for name, ids in DOMAINS.items():
                data = b"\n".join(fetch(i, args.timeout) for i in ids)
                if len(data) < args.min_bytes:
                    raise ValueError(f"domain {name} has only {len(data)} bytes")
                tf = encode_corpus(data, out / f"{name}.tok")
                log.info("%s: %d tokens", name, tf.token_count)
                lines.append(f"{name} 1.0 {name}.tok")
            (out / "mixture.txt").write_text("\n".join(lines) + "\n")
            print(out / "mixture.txt")
            return 0
        except (OSError, ValueError) as exc:
            log.warning("download failed (%s); writing the offline corpus instead", exc)
    print(write_local_corpus(out, args.min_bytes))
    return 0


if __name__ == "__main__":
    sys.exit(main())
