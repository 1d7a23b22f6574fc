"""
Box and mask geometry shared by matching, losses and evaluation.

Boxes are normalized center-size (cx, cy, w, h) tensors of shape [..., 4].
Area computations use corners clamped into [0, 1]. The pairwise functions
return [N, M] matrices; scalar comparisons use single-row inputs.
"""
import torch


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _clamped_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    return box_cxcywh_to_xyxy(boxes).clamp(0.0, 1.0)


def _area(xyxy: torch.Tensor) -> torch.Tensor:
    return (xyxy[..., 2] - xyxy[..., 0]).clamp(min=0) * (xyxy[..., 3] - xyxy[..., 1]).clamp(min=0)


def _iou_and_union(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    area_a = _area(a)
    area_b = _area(b)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a_xyxy, b_xyxy = _clamped_xyxy(a.reshape(-1, 4)), _clamped_xyxy(b.reshape(-1, 4))
    iou, _ = _iou_and_union(a_xyxy, b_xyxy)
    return iou


def box_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU minus the share of the enclosing hull not covered by the union."""
    a_xyxy, b_xyxy = _clamped_xyxy(a.reshape(-1, 4)), _clamped_xyxy(b.reshape(-1, 4))
    iou, union = _iou_and_union(a_xyxy, b_xyxy)
    lt = torch.min(a_xyxy[:, None, :2], b_xyxy[None, :, :2])
    rb = torch.max(a_xyxy[:, None, 2:], b_xyxy[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou - (hull - union) / hull


def l1_box(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.cdist(a.reshape(-1, 4), b.reshape(-1, 4), p=1)


def box_from_mask(mask: torch.Tensor, canvas: tuple[int, int] | None = None) -> torch.Tensor:
    """
    Tightest box over the foreground, pixel-edge convention: column j spans
    [j, j+1) / W, so a full-canvas mask maps to (0.5, 0.5, 1, 1).
    """
    mask = torch.as_tensor(mask).bool()
    if canvas is not None and tuple(mask.shape) != tuple(canvas):
        raise ValueError(f"Mask shape {tuple(mask.shape)} does not match canvas {tuple(canvas)}")
    if not mask.any():
        raise ValueError("empty mask has no box")
    height, width = mask.shape
    rows = torch.nonzero(mask.any(dim=1)).flatten()
    cols = torch.nonzero(mask.any(dim=0)).flatten()
    x0, x1 = cols[0].item(), cols[-1].item() + 1
    y0, y1 = rows[0].item(), rows[-1].item() + 1
    xyxy = torch.tensor(
        [x0 / width, y0 / height, x1 / width, y1 / height], dtype=torch.float64
    )
    return box_xyxy_to_cxcywh(xyxy)


def box_to_mask(box: torch.Tensor, canvas: tuple[int, int]) -> torch.Tensor:
    """Rasterize a normalized box: every pixel whose cell intersects the box interior."""
    height, width = canvas
    x0, y0, x1, y1 = box_cxcywh_to_xyxy(box.double()).clamp(0.0, 1.0).tolist()
    c0, c1 = int(x0 * width + 1e-9), int(torch.tensor(x1 * width - 1e-9).ceil().item())
    r0, r1 = int(y0 * height + 1e-9), int(torch.tensor(y1 * height - 1e-9).ceil().item())
    out = torch.zeros(canvas, dtype=torch.bool)
    out[r0:max(r1, r0 + 1), c0:max(c1, c0 + 1)] = True
    return out


def boxes_from_masks(masks: torch.Tensor) -> torch.Tensor:
    if masks.numel() == 0 or masks.shape[0] == 0:
        return torch.zeros((0, 4), dtype=torch.float32)
    return torch.stack([box_from_mask(m) for m in masks]).float()
