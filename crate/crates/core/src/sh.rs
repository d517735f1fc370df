//! Real spherical harmonics up to degree 7.
//!
//! Orthonormal real basis without the Condon–Shortley phase, flattened in
//! `(l ascending, m = −l..=l)` order, so `Y_1 = (c·y, c·z, c·x)`. Every
//! entry is a hard-coded polynomial in the direction components.

use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 7;

/// Number of basis functions up to and including `degree`.
pub const fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShBasisValues {
    pub degree: usize,
    pub values: Vec<f64>,
}

/// Evaluates the basis at a unit direction.
pub fn eval_sh(degree: usize, d: [f64; 3]) -> Result<ShBasisValues> {
    if degree > MAX_DEGREE {
        return Err(Error::Unsupported(format!(
            "spherical harmonics degree {degree} (max {MAX_DEGREE})"
        )));
    }
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("direction has norm {norm}, expected 1")));
    }
    let mut values = vec![0.0; basis_count(degree)];
    eval_sh_into(degree, d, &mut values);
    Ok(ShBasisValues { degree, values })
}

/// Unchecked variant writing `basis_count(degree)` values into `out`.
pub fn eval_sh_into(degree: usize, d: [f64; 3], out: &mut [f64]) {
    debug_assert!(degree <= MAX_DEGREE && out.len() >= basis_count(degree));
    let [x, y, z] = d;
    let (x2, y2, z2) = (x * x, y * y, z * z);
    let (x3, y3, z3) = (x2 * x, y2 * y, z2 * z);
    let (x4, y4, z4) = (x2 * x2, y2 * y2, z2 * z2);
    let (x5, y5, z5) = (x4 * x, y4 * y, z4 * z);
    let (x6, y6, z6) = (x3 * x3, y3 * y3, z3 * z3);
    let (x7, y7, z7) = (x6 * x, y6 * y, z6 * z);
    out[0] = 0.28209479177387814;
    if degree < 1 {
        return;
    }
    out[1] = 0.4886025119029199 * y;
    out[2] = 0.4886025119029199 * z;
    out[3] = 0.4886025119029199 * x;
    if degree < 2 {
        return;
    }
    out[4] = 1.0925484305920792 * x * y;
    out[5] = 1.0925484305920792 * y * z;
    out[6] = 0.94617469575756 * z2 - 0.31539156525252;
    out[7] = 1.0925484305920792 * x * z;
    out[8] = 0.5462742152960396 * x2 - 0.5462742152960396 * y2;
    if degree < 3 {
        return;
    }
    out[9] = 1.7701307697799304 * x2 * y - 0.5900435899266435 * y3;
    out[10] = 2.8906114426405543 * x * y * z;
    out[11] = 2.2852289973223288 * y * z2 - 0.4570457994644657 * y;
    out[12] = 1.865881662950577 * z3 - 1.1195289977703462 * z;
    out[13] = 2.2852289973223288 * x * z2 - 0.4570457994644657 * x;
    out[14] = 1.4453057213202771 * x2 * z - 1.4453057213202771 * y2 * z;
    out[15] = 0.5900435899266435 * x3 - 1.7701307697799304 * x * y2;
    if degree < 4 {
        return;
    }
    out[16] = 2.5033429417967046 * x3 * y - 2.5033429417967046 * x * y3;
    out[17] = 5.310392309339791 * x2 * y * z - 1.7701307697799304 * y3 * z;
    out[18] = 6.623222870302921 * x * y * z2 - 0.94617469575756 * x * y;
    out[19] = 4.683325804901024 * y * z3 - 2.0071396306718676 * y * z;
    out[20] = 3.7024941420321507 * z4 - 3.173566407456129 * z2 + 0.31735664074561293;
    out[21] = 4.683325804901024 * x * z3 - 2.0071396306718676 * x * z;
    out[22] =
        3.3116114351514603 * x2 * z2 - 0.47308734787878 * x2 - 3.3116114351514603 * y2 * z2 + 0.47308734787878 * y2;
    out[23] = 1.7701307697799304 * x3 * z - 5.310392309339791 * x * y2 * z;
    out[24] = 0.6258357354491761 * x4 - 3.755014412695057 * x2 * y2 + 0.6258357354491761 * y4;
    if degree < 5 {
        return;
    }
    out[25] = 3.2819102842008507 * x4 * y - 6.5638205684017015 * x2 * y3 + 0.6563820568401701 * y5;
    out[26] = 8.302649259524165 * x3 * y * z - 8.302649259524165 * x * y3 * z;
    out[27] = 13.209434084751761 * x2 * y * z2 - 1.467714898305751 * x2 * y - 4.403144694917254 * y3 * z2
        + 0.4892382994352504 * y3;
    out[28] = 14.380610354919972 * x * y * z3 - 4.793536784973324 * x * y * z;
    out[29] = 9.511879675109636 * y * z4 - 6.341253116739757 * y * z2 + 0.45294665119569694 * y;
    out[30] = 7.367870314565686 * z5 - 8.186522571739651 * z3 + 1.754254836801354 * z;
    out[31] = 9.511879675109636 * x * z4 - 6.341253116739757 * x * z2 + 0.45294665119569694 * x;
    out[32] = 7.190305177459986 * x2 * z3 - 2.396768392486662 * x2 * z - 7.190305177459986 * y2 * z3
        + 2.396768392486662 * y2 * z;
    out[33] = 4.403144694917254 * x3 * z2 - 0.4892382994352504 * x3 - 13.209434084751761 * x * y2 * z2
        + 1.467714898305751 * x * y2;
    out[34] = 2.075662314881041 * x4 * z - 12.453973889286248 * x2 * y2 * z + 2.075662314881041 * y4 * z;
    out[35] = 0.6563820568401701 * x5 - 6.5638205684017015 * x3 * y2 + 3.2819102842008507 * x * y4;
    if degree < 6 {
        return;
    }
    out[36] = 4.099104631151486 * x5 * y - 13.663682103838287 * x3 * y3 + 4.099104631151486 * x * y5;
    out[37] = 11.83309581115876 * x4 * y * z - 23.66619162231752 * x2 * y3 * z + 2.366619162231752 * y5 * z;
    out[38] = 22.200855632063863 * x3 * y * z2 - 2.0182596029148967 * x3 * y - 22.200855632063863 * x * y3 * z2
        + 2.0182596029148967 * x * y3;
    out[39] = 30.399773563992476 * x2 * y * z3 - 8.29084733563431 * x2 * y * z - 10.133257854664159 * y3 * z3
        + 2.7636157785447706 * y3 * z;
    out[40] = 30.399773563992476 * x * y * z4 - 16.58169467126862 * x * y * z2 + 0.9212052595149235 * x * y;
    out[41] = 19.226504963118135 * y * z5 - 17.478640875561943 * y * z3 + 2.913106812593657 * y * z;
    out[42] = 14.684485723822167 * z6 - 20.024298714302954 * z4 + 6.674766238100985 * z2 - 0.3178460113381421;
    out[43] = 19.226504963118135 * x * z5 - 17.478640875561943 * x * z3 + 2.913106812593657 * x * z;
    out[44] = 15.199886781996238 * x2 * z4 - 8.29084733563431 * x2 * z2 + 0.46060262975746175 * x2
        - 15.199886781996238 * y2 * z4
        + 8.29084733563431 * y2 * z2
        - 0.46060262975746175 * y2;
    out[45] = 10.133257854664159 * x3 * z3 - 2.7636157785447706 * x3 * z - 30.399773563992476 * x * y2 * z3
        + 8.29084733563431 * x * y2 * z;
    out[46] = 5.550213908015966 * x4 * z2 - 0.5045649007287242 * x4 - 33.301283448095795 * x2 * y2 * z2
        + 3.027389404372345 * x2 * y2
        + 5.550213908015966 * y4 * z2
        - 0.5045649007287242 * y4;
    out[47] = 2.366619162231752 * x5 * z - 23.66619162231752 * x3 * y2 * z + 11.83309581115876 * x * y4 * z;
    out[48] =
        0.6831841051919143 * x6 - 10.247761577878714 * x4 * y2 + 10.247761577878714 * x2 * y4 - 0.6831841051919143 * y6;
    if degree < 7 {
        return;
    }
    out[49] = 4.950139127672173 * x6 * y - 24.750695638360867 * x4 * y3 + 14.85041738301652 * x2 * y5
        - 0.7071627325245962 * y7;
    out[50] = 15.875763970811402 * x5 * y * z - 52.919213236038004 * x3 * y3 * z + 15.875763970811402 * x * y5 * z;
    out[51] = 33.72951261681692 * x4 * y * z2 - 2.5945778936013015 * x4 * y - 67.45902523363384 * x2 * y3 * z2
        + 5.189155787202603 * x2 * y3
        + 6.745902523363384 * y5 * z2
        - 0.5189155787202603 * y5;
    out[52] = 53.96722018690707 * x3 * y * z3 - 12.453973889286248 * x3 * y * z - 53.96722018690707 * x * y3 * z3
        + 12.453973889286248 * x * y3 * z;
    out[53] = 67.12088262692414 * x2 * y * z4 - 30.97886890473422 * x2 * y * z2 + 1.4081304047606462 * x2 * y
        - 22.373627542308046 * y3 * z4
        + 10.326289634911406 * y3 * z2
        - 0.4693768015868821 * y3;
    out[54] = 63.28217501963252 * x * y * z5 - 48.67859616894809 * x * y * z3 + 6.63799038667474 * x * y * z;
    out[55] =
        38.75225965289993 * y * z6 - 44.714145753346074 * y * z4 + 12.194767023639837 * y * z2 - 0.4516580379125866 * y;
    out[56] = 29.29395479525012 * z7 - 47.32100390001943 * z5 + 21.50954722728156 * z3 - 2.389949691920173 * z;
    out[57] =
        38.75225965289993 * x * z6 - 44.714145753346074 * x * z4 + 12.194767023639837 * x * z2 - 0.4516580379125866 * x;
    out[58] = 31.64108750981626 * x2 * z5 - 24.339298084474045 * x2 * z3 + 3.31899519333737 * x2 * z
        - 31.64108750981626 * y2 * z5
        + 24.339298084474045 * y2 * z3
        - 3.31899519333737 * y2 * z;
    out[59] = 22.373627542308046 * x3 * z4 - 10.326289634911406 * x3 * z2 + 0.4693768015868821 * x3
        - 67.12088262692414 * x * y2 * z4
        + 30.97886890473422 * x * y2 * z2
        - 1.4081304047606462 * x * y2;
    out[60] = 13.491805046726768 * x4 * z3 - 3.113493472321562 * x4 * z - 80.9508302803606 * x2 * y2 * z3
        + 18.680960833929372 * x2 * y2 * z
        + 13.491805046726768 * y4 * z3
        - 3.113493472321562 * y4 * z;
    out[61] = 6.745902523363384 * x5 * z2 - 0.5189155787202603 * x5 - 67.45902523363384 * x3 * y2 * z2
        + 5.189155787202603 * x3 * y2
        + 33.72951261681692 * x * y4 * z2
        - 2.5945778936013015 * x * y4;
    out[62] = 2.6459606618019 * x6 * z - 39.68940992702851 * x4 * y2 * z + 39.68940992702851 * x2 * y4 * z
        - 2.6459606618019 * y6 * z;
    out[63] = 0.7071627325245962 * x7 - 14.85041738301652 * x5 * y2 + 24.750695638360867 * x3 * y4
        - 4.950139127672173 * x * y6;
}
