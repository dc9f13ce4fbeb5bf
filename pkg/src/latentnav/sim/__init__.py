"""2-D differential-drive simulator: worlds, kinematics, camera, planner, scripted policies."""

from .kinematics import ActionCommand, Limits, clamp_command, step_kinematics
from .planner import NoRouteError, plan_route
from .policies import RandomPolicy, RandomPolicyState, TeacherOutput, TeacherPolicy, random_act, teacher_act
from .render import Observation, render_observation
from .route import RouteSegment, localize_route, path_targets, to_robot_frame, to_world_frame
from .world import (
    BACKGROUND,
    CLASS_NAMES,
    FAMILIES,
    N_CLASSES,
    NAVIGABLE,
    WALL,
    Pose,
    Scenario,
    ScenarioError,
    ScenarioSpec,
    World,
    check_collision,
    default_spec,
    generate_scenario,
)
