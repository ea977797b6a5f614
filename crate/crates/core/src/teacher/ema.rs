use crate::error::{Error, Result};
use crate::teacher::detector::Model;

/// `t <- alpha * t + (1 - alpha) * s`, element-wise.
pub fn ema_update_slice(teacher: &mut [f64], student: &[f64], alpha: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Domain(format!(
            "EMA over {} teacher and {} student parameters",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

pub fn ema_update(teacher: &mut Model, student: &Model, alpha: f64) -> Result<()> {
    if !teacher.same_shape(student) {
        return Err(Error::Domain("teacher and student shapes differ".into()));
    }
    for (t, s) in teacher.buffers_mut().into_iter().zip(student.buffers()) {
        ema_update_slice(t, s, alpha)?;
    }
    Ok(())
}
