"""Convert a NewsCLIPpings annotation split into the JSON-lines dataset format.

NewsCLIPpings ships annotation files such as ``merged_balanced/test.json``
with ``{"annotations": [{"id", "image_id", "falsified", ...}]}`` where ``id``
is the VisualNews caption id and ``image_id`` the VisualNews image id. The
captions and image paths come from the VisualNews ``data.json`` list.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterator

from .errors import DatasetMalformed


def convert_newsclippings(
    annotations_path: str | Path, visualnews_path: str | Path, image_root: str | Path | None = None
) -> Iterator[dict[str, Any]]:
    annotations = json.loads(Path(annotations_path).read_text(encoding="utf-8"))["annotations"]
    visualnews = {int(v["id"]): v for v in json.loads(Path(visualnews_path).read_text(encoding="utf-8"))}
    root = Path(image_root) if image_root is not None else None
    for n, ann in enumerate(annotations):
        try:
            caption = visualnews[int(ann["id"])]["caption"]
            image = visualnews[int(ann["image_id"])]["image_path"]
        except KeyError as exc:
            raise DatasetMalformed(f"annotation #{n}: unknown VisualNews id or field {exc}") from None
        if root is not None:
            image = str(root / image.removeprefix("./"))
        yield {
            "id": f"{ann['id']}-{ann['image_id']}",
            "image_path": image,
            "caption": caption,
            "ooc": bool(ann["falsified"]),
        }


def write_jsonl(records: Iterator[dict[str, Any]], out: str | Path) -> int:
    n = 0
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n
