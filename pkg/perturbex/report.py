"""Static HTML gallery and expert plausibility annotations.

The gallery is a tree of plain HTML pages with relative links: ``index.html``
lists conditions, and each condition page shows one triptych row per record
(original with pre-edit detections, edit mask, perturbed image with post-edit
detections). Regenerating from the same run is byte-identical.
"""

from __future__ import annotations

import csv
import html
import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .core import Detection, RasterImage, read_image, write_image
from .errors import AnnotationError, ImageIOError
from .metrics import OutcomeRecord, Plausibility, summarize
from .prompts import list_environments
from .runner import RunResult

logger = logging.getLogger(__name__)

GALLERY_DIR = "gallery"
STROKE_PX = 2
DASH_ON = 4
DASH_OFF = 3
PRE_COLOR = (0, 200, 255)
POST_COLOR = (255, 220, 0)
LABEL_TEXT = (0, 0, 0)


def stroke_mask(
    bbox: tuple[int, int, int, int], width: int, height: int, *, dashed: bool = False
) -> np.ndarray:
    """Pixels of a box outline drawn inward from the box edge."""
    x, y, w, h = bbox
    x0, y0 = max(0, x), max(0, y)
    x1, y1 = min(width, x + w), min(height, y + h)
    mask = np.zeros((height, width), dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return mask
    ys, xs = np.mgrid[0:height, 0:width]
    inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    horizontal = (ys < y0 + STROKE_PX) | (ys >= y1 - STROKE_PX)
    vertical = (xs < x0 + STROKE_PX) | (xs >= x1 - STROKE_PX)
    if dashed:
        period = DASH_ON + DASH_OFF
        horizontal &= (xs - x0) % period < DASH_ON
        vertical &= (ys - y0) % period < DASH_ON
    mask[inside & (horizontal | vertical)] = True
    return mask


def draw_detections(
    image: RasterImage,
    detections: Sequence[Detection],
    tau: float,
    *,
    color: tuple[int, int, int] = PRE_COLOR,
    labels: bool = False,
) -> RasterImage:
    """Overlay boxes: solid at or above tau, dashed below.

    Only stroke pixels change unless ``labels`` is set. With labels, each box at
    or above tau also gets a class/confidence tag painted just above it, or
    inside its top edge when there is no room.
    """
    if not detections:
        return image
    pixels = image.pixels.copy()
    for det in detections:
        pixels[stroke_mask(det.bbox, image.width, image.height, dashed=det.confidence < tau)] = color
    if labels:
        canvas = Image.fromarray(pixels)
        draw = ImageDraw.Draw(canvas)
        font = ImageFont.load_default()
        for det in detections:
            if det.confidence < tau:
                continue
            x, y = det.bbox[0], det.bbox[1]
            text = f"{det.class_label} {det.confidence:.2f}"
            left, top, right, bottom = draw.textbbox((0, 0), text, font=font)
            anchor_y = y - (bottom - top) - 2 if y - (bottom - top) - 2 >= 0 else y + STROKE_PX
            draw.rectangle(
                (x, anchor_y, x + right - left + 1, anchor_y + bottom - top + 1), fill=color
            )
            draw.text((x + 1 - left, anchor_y - top), text, fill=LABEL_TEXT, font=font)
        pixels = np.asarray(canvas)
    return RasterImage(pixels)


PAGE_HEADER = """<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>
body {{ font-family: sans-serif; background: #fafafa; color: #222; margin: 20px; }}
table {{ border-collapse: collapse; }}
td, th {{ border: 1px solid #ccc; padding: 4px 8px; vertical-align: top; }}
.triptych img {{ max-width: 320px; height: auto; }}
.placeholder {{ width: 160px; height: 120px; background: #eee; color: #900; text-align: center; }}
.badge {{ display: inline-block; padding: 1px 6px; margin-right: 4px; border-radius: 3px; font-weight: bold; font-size: 0.8em; }}
.flip {{ background: #c0392b; color: #fff; }}
.spurious {{ background: #e67e22; color: #fff; }}
.failed {{ background: #555; color: #fff; }}
</style>
</head>
<body>
"""
PAGE_FOOTER = "</body>\n</html>\n"


@dataclass
class Gallery:
    index: Path
    pages: list[Path] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in text)


def _fmt(value: float | None, digits: int = 3) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


class _GalleryWriter:
    def __init__(self, result: RunResult, out: Path) -> None:
        self.result = result
        self.out = out
        self.warnings: list[str] = []

    def _rel(self, target: Path, page_dir: Path) -> str:
        return Path(os.path.relpath(target, page_dir)).as_posix()

    def _artifact(self, record: OutcomeRecord, name: str) -> Path:
        return self.result.artifact_dir(record.image_id, record.spec_hash) / name

    def _overlay(self, record: OutcomeRecord, source: str, detections: Sequence[Detection], color: tuple[int, int, int]) -> Path | None:
        path = self._artifact(record, source)
        try:
            image = read_image(path)
        except ImageIOError:
            self.warnings.append(f"missing artifact {path.relative_to(self.result.output_dir).as_posix()}")
            logger.warning("gallery: missing artifact %s", path)
            return None
        target = self.out / "overlays" / record.image_id / record.spec_hash / source
        target.parent.mkdir(parents=True, exist_ok=True)
        write_image(draw_detections(image, detections, record.tau, color=color, labels=True), target)
        return target

    def _cell(self, path: Path | None, caption: str) -> str:
        if path is None:
            return f'<td><div class="placeholder">missing<br>{html.escape(caption)}</div></td>'
        if not path.exists():
            rel = path.relative_to(self.result.output_dir).as_posix()
            self.warnings.append(f"missing artifact {rel}")
            logger.warning("gallery: missing artifact %s", path)
            return f'<td><div class="placeholder">missing<br>{html.escape(caption)}</div></td>'
        src = html.escape(self._rel(path, self.out))
        return f'<td><img src="{src}" alt="{html.escape(caption)}"><br>{html.escape(caption)}</td>'

    def row(self, record: OutcomeRecord) -> str:
        badges = []
        if not record.is_scored:
            badges.append('<span class="badge failed">FAILED</span>')
        elif record.flipped:
            badges.append('<span class="badge flip">FLIP</span>')
        if record.is_scored and record.count_delta > 0:
            badges.append(f'<span class="badge spurious">SPURIOUS +{record.count_delta}</span>')
        info = (
            f"<td><b>{html.escape(record.image_id)}</b><br>{''.join(badges)}<br>"
            f"pre {_fmt(record.pre_top_tau)} ({record.pre_count_tau})<br>"
            f"post {_fmt(record.post_top_tau)} ({record.post_count_tau})<br>"
            f"plausibility: {html.escape(str(record.manual_plausibility))}"
        )
        if record.error:
            info += f"<br>error: {html.escape(record.error)}"
        info += f"<br><small>{html.escape(record.spec_hash)}</small></td>"
        if not record.is_scored:
            return f'<tr class="triptych">{info}<td colspan="3">no artifacts</td></tr>'
        original = self._overlay(record, "original.png", record.pre_detections, PRE_COLOR)
        perturbed = self._overlay(record, "perturbed.png", record.post_detections, POST_COLOR)
        cells = [
            self._cell(original, "original + detections"),
            self._cell(self._artifact(record, "mask.png"), "mask"),
            self._cell(perturbed, "perturbed + detections"),
        ]
        return f'<tr class="triptych">{info}{"".join(cells)}</tr>'

    def condition_page(self, condition: str, records: list[OutcomeRecord]) -> Path:
        summary = self.result.summary_for(condition)
        lines = [
            PAGE_HEADER.format(title=html.escape(condition)),
            f"<h1>{html.escape(condition)}</h1>",
            '<p><a href="index.html">index</a></p>',
            f"<p>N={summary.N} flips={summary.flips} flip rate={_fmt(summary.flip_rate)} "
            f"CD={_fmt(summary.cd_mean)} &plusmn; {_fmt(summary.cd_std)} "
            f"spurious={summary.spurious} failed={summary.failed} tau={summary.tau}</p>",
        ]
        if summary.per_environment:
            for env, group in summary.per_environment.items():
                lines.append(
                    f"<h2>{html.escape(env)}: N={group.n} flips={group.flips} "
                    f"flip rate={_fmt(group.flip_rate)}</h2>"
                )
                lines.append("<table>")
                lines.extend(self.row(r) for r in records if r.is_scored and r.environment == env)
                lines.append("</table>")
            unscored = [r for r in records if not r.is_scored]
            if unscored:
                lines.append("<h2>failed</h2><table>")
                lines.extend(self.row(r) for r in unscored)
                lines.append("</table>")
        else:
            lines.append("<table>")
            lines.extend(self.row(r) for r in records)
            lines.append("</table>")
        lines.append(PAGE_FOOTER)
        path = self.out / f"condition-{_slug(condition)}.html"
        path.write_text("\n".join(lines), encoding="utf-8")
        return path

    def index_page(self, pages: dict[str, Path]) -> Path:
        result = self.result
        lines = [
            PAGE_HEADER.format(title="perturbation gallery"),
            "<h1>perturbation gallery</h1>",
            f"<p>images={result.metadata.get('manifest_size', 'n/a')} records={len(result.records)} "
            f"exclusions={len(result.exclusions)} tau={result.config.tau}</p>",
            "<table><tr><th>condition</th><th>N</th><th>flips</th><th>flip rate</th>"
            "<th>CD</th><th>spurious</th><th>failed</th></tr>",
        ]
        for summary in result.summaries:
            name = summary.condition or ""
            href = html.escape(pages[name].name)
            lines.append(
                f'<tr><td><a href="{href}">{html.escape(name)}</a></td><td>{summary.N}</td>'
                f"<td>{summary.flips}</td><td>{_fmt(summary.flip_rate)}</td>"
                f"<td>{_fmt(summary.cd_mean)}</td><td>{summary.spurious}</td><td>{summary.failed}</td></tr>"
            )
        lines.append("</table>")
        if self.warnings:
            lines.append("<h2>warnings</h2><ul>")
            lines.extend(f"<li>{html.escape(w)}</li>" for w in self.warnings)
            lines.append("</ul>")
        lines.append(PAGE_FOOTER)
        path = self.out / "index.html"
        path.write_text("\n".join(lines), encoding="utf-8")
        return path


def render_gallery(result: RunResult, output: str | Path | None = None) -> Gallery:
    """Write the gallery tree; missing artifacts become placeholder cells and warnings."""
    out = Path(output) if output is not None else result.output_dir / GALLERY_DIR
    out.mkdir(parents=True, exist_ok=True)
    writer = _GalleryWriter(result, out)
    pages: dict[str, Path] = {}
    for summary in result.summaries:
        condition = summary.condition or ""
        records = [r for r in result.records if r.condition == condition]
        pages[condition] = writer.condition_page(condition, records)
    index = writer.index_page(pages)
    logger.info("gallery written to %s (%d pages)", out, len(pages))
    return Gallery(index=index, pages=list(pages.values()), warnings=list(writer.warnings))


ANNOTATION_COLUMNS = ("image_id", "spec_hash", "plausibility")


def read_annotations(path: str | Path) -> list[tuple[int, str, str, Plausibility]]:
    """Rows as (line number, image_id, spec_hash, label)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise AnnotationError(f"could not read annotations {path}: {exc}") from exc
    if not text.strip():
        return []
    reader = csv.DictReader(text.splitlines())
    missing = [c for c in ANNOTATION_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise AnnotationError(f"annotations {path} lack columns {missing}")
    rows = []
    for line, row in enumerate(reader, start=2):
        label = (row["plausibility"] or "").strip().lower()
        try:
            plausibility = Plausibility(label)
        except ValueError:
            raise AnnotationError(
                f"row {line}: invalid plausibility {row['plausibility']!r}; "
                f"expected one of {[p.value for p in Plausibility]}"
            ) from None
        rows.append((line, row["image_id"].strip(), row["spec_hash"].strip(), plausibility))
    return rows


def import_annotations(path: str | Path, result: RunResult) -> RunResult:
    """Set manual_plausibility on matching records and recompute the summaries."""
    rows = read_annotations(path)
    if not rows:
        return result
    index = {(r.image_id, r.spec_hash): i for i, r in enumerate(result.records)}
    records = list(result.records)
    for line, image_id, spec_hash, label in rows:
        position = index.get((image_id, spec_hash))
        if position is None:
            raise AnnotationError(
                f"row {line}: unknown (image_id, spec_hash) pair ({image_id!r}, {spec_hash!r})"
            )
        records[position] = records[position].with_plausibility(label)

    env_order = [env.name for env in list_environments()]
    summaries = [
        summarize(
            [r for r in records if r.condition == s.condition],
            result.config.tau,
            condition=s.condition,
            environment_order=env_order,
        )
        for s in result.summaries
    ]
    logger.info("imported %d annotations from %s", len(rows), path)
    return replace(result, records=records, summaries=summaries)

