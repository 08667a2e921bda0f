# Builds expected_000000.txt from the label and calib with numpy. The bottom
# center goes through the inverse homogeneous transforms and is raised by h/2
# along lidar z; the yaw comes from the box corners mapped the same way.
import numpy as np

def calib(path):
    d = {}
    for line in open(path):
        k, v = line.split(":", 1)
        d[k] = np.array([float(x) for x in v.split()])
    r0 = np.eye(4); r0[:3, :3] = d["R0_rect"].reshape(3, 3)
    tr = np.eye(4); tr[:3, :] = d["Tr_velo_to_cam"].reshape(3, 4)
    return np.linalg.inv(tr) @ np.linalg.inv(r0)

cam_to_velo = calib("calib_000000.txt")
out = []
for line in open("label_000000.txt"):
    f = line.split()
    if f[0] not in ("Car", "Pedestrian", "Cyclist"):
        continue
    h, w, l, x, y, z, ry = map(float, f[8:15])
    xs = np.array([l, l, -l, -l, l, l, -l, -l]) / 2
    ys = np.array([0, 0, 0, 0, -h, -h, -h, -h])
    zs = np.array([w, -w, -w, w, w, -w, -w, w]) / 2
    rot = np.array([[np.cos(ry), 0, np.sin(ry)], [0, 1, 0], [-np.sin(ry), 0, np.cos(ry)]])
    corners = rot @ np.vstack([xs, ys, zs]) + np.array([[x], [y], [z]])
    hom = np.vstack([corners, np.ones(8)])
    v = (cam_to_velo @ hom)[:3]
    bottom = (cam_to_velo @ np.array([x, y, z, 1.0]))[:3]
    center = bottom + np.array([0.0, 0.0, h / 2])
    head = v[:, xs > 0].mean(axis=1) - v[:, xs < 0].mean(axis=1)
    yaw = np.arctan2(head[0], head[1])
    out.append(f"{f[0]} {center[0]:.9f} {center[1]:.9f} {center[2]:.9f} {h} {w} {l} {yaw:.9f}")
open("expected_000000.txt", "w").write("\n".join(out) + "\n")
