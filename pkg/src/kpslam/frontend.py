"""Per-frame tracking: PnP, camera voting, object init, measurement capture.

Each frame is processed in two passes.  The first pass runs RANSAC PnP on
prior-free detections (asymmetric objects plus first sightings of symmetric
ones), votes a camera pose among the resulting hypotheses, initializes or
re-initializes object poses, and locally refines the camera.  The second
pass projects the current estimates of already-initialized symmetric
objects into the image to form prior detections, re-queries the detector
conditioned on those priors, and stores the measurements from both passes.
"""

from dataclasses import dataclass, field

import numpy as np

from .backend import CHI2_2DOF_95, RefineConfig, _chol_inv_2x2, refine_pose
from .detector import detection_rng
from .errors import (
    AllBehindCamera,
    NoCameraPose,
    NoConsensus,
    NotConverged,
    TooFewCorrespondences,
)
from .geometry import CameraModel, RigidTransform, project_points
from .pnp import RansacConfig, ransac_pnp
from .scene import Measurement, SceneState
from .symmetry import build_prior

STREAM_PRIOR_FREE = 1
STREAM_PRIOR_CONDITIONED = 2
RANSAC_STREAM = 3  # rng lane for consensus sampling, disjoint from detection


@dataclass
class FrontEndConfig:
    seed: int = 0  # drives consensus sampling; frames stay reproducible
    tau: float = CHI2_2DOF_95  # chi-square gate for re-init counts
    min_hypothesis_inliers: int = 6
    min_hypothesis_fraction: float = 0.30
    # Votes are counted at tau * this factor: a hypothesis from one
    # object's PnP carries a few degrees of wobble, which shifts other
    # objects' reprojections by many sigma even when the hypothesis is
    # basically right, while flipped or garbage hypotheses miss by far
    # more than this still rejects.
    vote_gate_factor: float = 25.0
    reinit_window: int = 5  # frames of history considered for pose swaps
    mask_threshold: float = 0.5  # detections below this score are unusable
    # The voted pose is coarse, so the pre-refinement gate must tolerate
    # residuals far beyond per-measurement noise; it only exists to drop
    # unambiguous garbage before the robust kernel sees it.
    refine_gate_factor: float = 100.0
    prior_enabled: bool = True
    refine_camera: bool = True
    ransac: RansacConfig = field(default_factory=RansacConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)


@dataclass
class FrameInput:
    """Detector output for one image.

    ``detections`` maps object_id to prior-free keypoint detections; the
    prior-conditioned ones are re-queried during processing because they
    depend on the camera estimate of this very frame.
    """

    frame_id: int
    detections: dict  # object_id -> list[KeypointDetection]
    bboxes: dict  # object_id -> BoundingBox
    external_cam_pose: RigidTransform | None = None


@dataclass
class FrameSummary:
    frame_id: int
    accepted: bool
    camera_source: str  # "gauge" | "voted" | "external" | "dropped"
    n_hypotheses: int = 0
    best_vote: int = 0
    n_testable: int = 0
    vote_floor: int = 0
    voted_pose: RigidTransform | None = None
    refined: bool = False
    initialized: list = field(default_factory=list)
    reinitialized: list = field(default_factory=list)
    pnp_failures: dict = field(default_factory=dict)  # object_id -> reason
    prior_skipped: list = field(default_factory=list)  # AllBehindCamera objects
    n_stored: int = 0


class FrontEnd:
    """Stateful frame-by-frame estimator writing into a SceneState.

    Parameters
    ----------
    camera : CameraModel
    models : dict mapping object_id to ObjectModel
    prior_detector : optional callable (frame_id, object_id, prior, bbox)
        -> list[KeypointDetection], queried in the second pass for
        symmetric objects that already carry a pose estimate.  Without it
        (or with ``prior_enabled=False``) every object is handled with
        prior-free detections.
    """

    def __init__(self, camera: CameraModel, models: dict,
                 config: FrontEndConfig | None = None, prior_detector=None):
        self.camera = camera
        self.models = dict(models)
        self.config = config or FrontEndConfig()
        self.prior_detector = prior_detector
        self.scene = SceneState(camera, self.models)

    # -- helpers ---------------------------------------------------------

    def _usable(self, detections) -> list:
        thr = self.config.mask_threshold
        return [d for d in detections if d.mask_score >= thr]

    def _routes(self, frame: FrameInput):
        """Split this frame's objects into prior-free and prior-conditioned."""
        first, conditioned = [], []
        for obj_id in frame.detections:
            model = self.models[obj_id]
            if (self.config.prior_enabled and self.prior_detector is not None
                    and model.is_symmetric and obj_id in self.scene.obj_poses):
                conditioned.append(obj_id)
            else:
                first.append(obj_id)
        return first, conditioned

    def _count_inliers(self, cam_pose, obj_pose, model, detections,
                       tau: float | None = None) -> int:
        if not detections:
            return 0
        gate = self.config.tau if tau is None else tau
        pts = np.array([model.point_for(d.keypoint_id) for d in detections])
        uv, valid = project_points(self.camera, cam_pose.compose(obj_pose).apply(pts))
        if not valid.any():
            return 0
        r = uv - np.array([d.coord for d in detections])
        linv = _chol_inv_2x2(np.array([d.cov for d in detections]))
        w = np.einsum("nij,nj->ni", linv, np.nan_to_num(r))
        q = np.einsum("ni,ni->n", w, w)
        return int(np.count_nonzero(valid & (q < gate)))

    # -- first pass ------------------------------------------------------

    def first_pass(self, frame: FrameInput, route: list) -> tuple:
        """RANSAC PnP per prior-free object; failures recorded, not raised."""
        results, failures = {}, {}
        for obj_id in route:
            dets = self._usable(frame.detections[obj_id])
            if len(dets) < 4:
                failures[obj_id] = "TooFewCorrespondences"
                continue
            model = self.models[obj_id]
            pts = np.array([model.point_for(d.keypoint_id) for d in dets])
            px = np.array([d.coord for d in dets])
            covs = np.array([d.cov for d in dets])
            rng = detection_rng(self.config.seed, frame.frame_id, obj_id,
                                RANSAC_STREAM)
            try:
                results[obj_id] = ransac_pnp(pts, px, covs, self.camera,
                                             self.config.ransac, rng=rng)
            except (NoConsensus, TooFewCorrespondences) as exc:
                failures[obj_id] = type(exc).__name__
        return results, failures

    # -- camera voting ---------------------------------------------------

    def select_camera_pose(self, frame: FrameInput, pnp_results: dict,
                           summary: FrameSummary) -> RigidTransform:
        """Pick the camera hypothesis agreeing with the most detections.

        Every PnP pose of an already-initialized object yields the
        hypothesis ``T_pnp∘T_obj⁻¹``; each is scored by inlier count over
        the initialized prior-free-route objects detected in this frame.
        Prior-conditioned objects sit out the vote: their canonical labels
        depend on the very pose being chosen, so they can neither support
        nor veto a hypothesis.  Counting uses a widened gate
        (``tau * vote_gate_factor``) because single-object PnP leaves a
        few-degree wobble that displaces *other* objects by many sigma
        while grossly wrong hypotheses still land far outside it.  A
        winner below ``max(min_inliers, fraction·testable)`` is rejected;
        the external pose (if any) is the fallback.

        Raises:
            NoCameraPose: nothing survived and no external pose exists.
        """
        _, conditioned = self._routes(frame)
        sitting_out = set(conditioned)
        votable = []  # (object_id, detections) usable as ballots
        for obj_id in frame.detections:
            if obj_id not in self.scene.obj_poses or obj_id in sitting_out:
                continue
            dets = self._usable(frame.detections[obj_id])
            if dets:
                votable.append((obj_id, dets))
        n_testable = sum(len(d) for _, d in votable)
        floor = max(self.config.min_hypothesis_inliers,
                    int(np.ceil(self.config.min_hypothesis_fraction * n_testable)))
        summary.n_testable = n_testable
        summary.vote_floor = floor

        hypotheses = []
        for obj_id, result in pnp_results.items():
            if obj_id in self.scene.obj_poses:
                hyp = result.pose.compose(self.scene.obj_poses[obj_id].inverse())
                hypotheses.append(hyp)
        summary.n_hypotheses = len(hypotheses)

        gate = self.config.tau * self.config.vote_gate_factor
        best, best_score = None, (-1, -1)
        for hyp in hypotheses:
            wide = strict = 0
            for obj_id, dets in votable:
                obj_pose = self.scene.obj_poses[obj_id]
                model = self.models[obj_id]
                wide += self._count_inliers(hyp, obj_pose, model, dets, tau=gate)
                strict += self._count_inliers(hyp, obj_pose, model, dets)
            # wide count decides whether the floor is reachable; the
            # strict count breaks the ties the wide gate saturates into
            if (wide, strict) > best_score:
                best, best_score = hyp, (wide, strict)
        best_count = best_score[0]
        summary.best_vote = max(best_count, 0)
        if best is not None and best_count >= floor:
            summary.camera_source = "voted"
            return best
        if frame.external_cam_pose is not None:
            summary.camera_source = "external"
            return frame.external_cam_pose
        raise NoCameraPose(f"frame {frame.frame_id}: best vote "
                           f"{max(best_count, 0)} < floor {floor}")

    # -- object bookkeeping -----------------------------------------------

    def initialize_objects(self, cam_pose, pnp_results, summary) -> None:
        """Give first-seen objects a global pose from this frame's PnP."""
        for obj_id, result in pnp_results.items():
            if obj_id not in self.scene.obj_poses:
                self.scene.obj_poses[obj_id] = cam_pose.inverse().compose(result.pose)
                summary.initialized.append(obj_id)

    def maybe_reinitialize(self, cam_pose, pnp_results, summary) -> None:
        """Swap an object pose when this frame's PnP explains history better.

        Counts chi-square inliers of the current pose versus the candidate
        over the stored measurements of the last ``reinit_window`` frames;
        the candidate must be strictly better.
        """
        for obj_id, result in pnp_results.items():
            if obj_id in summary.initialized:
                continue
            candidate = cam_pose.inverse().compose(result.pose)
            frames = sorted({m.frame_id
                             for m in self.scene.measurements_of(object_id=obj_id)})
            window = frames[-self.config.reinit_window:]
            if not window:
                continue
            model = self.models[obj_id]
            cur, new = 0, 0
            for f in window:
                dets = self.scene.measurements_of(object_id=obj_id, frame_id=f)
                cur += self._count_inliers(self.scene.cam_poses[f],
                                           self.scene.obj_poses[obj_id], model, dets)
                new += self._count_inliers(self.scene.cam_poses[f],
                                           candidate, model, dets)
            if new > cur:
                self.scene.obj_poses[obj_id] = candidate
                summary.reinitialized.append(obj_id)

    # -- local refinement --------------------------------------------------

    def refine_camera_local(self, frame: FrameInput, cam_pose, route) -> tuple:
        """Re-solve this frame's camera against fixed object poses.

        Measurements are gated at the voted pose with a deliberately loose
        threshold (``tau * refine_gate_factor``): the point is to exclude
        garbage, not points merely displaced by voted-pose error, which are
        exactly the cross-object constraints refinement exists to exploit.
        Returns ``(pose, refined_flag)``; any failure keeps the voted pose.
        """
        gate = self.config.tau * self.config.refine_gate_factor
        pts, px, covs = [], [], []
        for obj_id in route:
            if obj_id not in self.scene.obj_poses:
                continue
            obj_pose = self.scene.obj_poses[obj_id]
            model = self.models[obj_id]
            dets = self._usable(frame.detections[obj_id])
            if not dets:
                continue
            local = np.array([model.point_for(d.keypoint_id) for d in dets])
            world = obj_pose.apply(local)
            uv, valid = project_points(self.camera, cam_pose.apply(world))
            r = np.nan_to_num(uv - np.array([d.coord for d in dets]))
            linv = _chol_inv_2x2(np.array([d.cov for d in dets]))
            w = np.einsum("nij,nj->ni", linv, r)
            q = np.einsum("ni,ni->n", w, w)
            keep = valid & (q < gate)
            for i, d in enumerate(dets):
                if keep[i]:
                    pts.append(world[i])
                    px.append(d.coord)
                    covs.append(d.cov)
        if not pts:
            return cam_pose, False
        try:
            result = refine_pose(cam_pose, np.array(pts), np.array(px),
                                 np.array(covs), self.camera, self.config.refine)
        except NotConverged:
            return cam_pose, False
        if not result.converged:
            return cam_pose, False
        return result.pose, True

    # -- second pass -------------------------------------------------------

    def second_pass(self, frame: FrameInput, cam_pose, conditioned,
                    summary) -> dict:
        """Re-query the detector for symmetric objects with pose priors."""
        out = {}
        for obj_id in conditioned:
            model = self.models[obj_id]
            try:
                prior = build_prior(model, cam_pose,
                                    self.scene.obj_poses[obj_id], self.camera)
            except AllBehindCamera:
                summary.prior_skipped.append(obj_id)
                continue
            dets = self.prior_detector(frame.frame_id, obj_id, prior,
                                       frame.bboxes.get(obj_id))
            out[obj_id] = dets
        return out

    # -- storage ------------------------------------------------------------

    def _store(self, frame_id, obj_id, detections, stream, summary) -> None:
        if obj_id not in self.scene.obj_poses:
            return
        for d in self._usable(detections):
            self.scene.add_measurement(Measurement(
                frame_id=frame_id, object_id=obj_id, keypoint_id=d.keypoint_id,
                coord=np.asarray(d.coord, dtype=float),
                cov=np.asarray(d.cov, dtype=float),
                stream=stream,
                true_coord=None if d.true_coord is None
                else np.asarray(d.true_coord, dtype=float),
                is_outlier=d.is_outlier,
            ))
            summary.n_stored += 1

    # -- top level -----------------------------------------------------------

    def process_frame(self, frame: FrameInput) -> FrameSummary:
        """Run both passes on one frame and absorb it into the scene.

        A frame whose camera pose cannot be established is dropped: no
        poses change and nothing is stored.
        """
        if frame.frame_id in self.scene.cam_poses:
            raise ValueError(f"frame {frame.frame_id} was already processed")
        summary = FrameSummary(frame.frame_id, accepted=False, camera_source="dropped")
        route_free, route_cond = self._routes(frame)
        pnp_results, summary.pnp_failures = self.first_pass(frame, route_free)

        first_frame = not self.scene.cam_poses
        if first_frame:
            cam_pose = RigidTransform.identity()
            summary.camera_source = "gauge"
        else:
            try:
                cam_pose = self.select_camera_pose(frame, pnp_results, summary)
            except NoCameraPose:
                return summary
        summary.voted_pose = cam_pose

        self.initialize_objects(cam_pose, pnp_results, summary)
        self.maybe_reinitialize(cam_pose, pnp_results, summary)
        if self.config.refine_camera and not first_frame:
            cam_pose, summary.refined = self.refine_camera_local(
                frame, cam_pose, route_free)

        self.scene.cam_poses[frame.frame_id] = cam_pose
        summary.accepted = True
        for obj_id in route_free:
            self._store(frame.frame_id, obj_id, frame.detections[obj_id],
                        STREAM_PRIOR_FREE, summary)
        for obj_id, dets in self.second_pass(frame, cam_pose, route_cond,
                                             summary).items():
            self._store(frame.frame_id, obj_id, dets,
                        STREAM_PRIOR_CONDITIONED, summary)
        return summary
